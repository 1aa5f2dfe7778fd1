//! Per-layer activations for token sequences.
//!
//! Activations come either from activation files on disk or from a small
//! decoder-only Transformer with causal self-attention and pre-norm residual
//! blocks. All model arithmetic is `f32` with sums accumulated sequentially
//! in index order, so a forward pass is bit-for-bit reproducible.
//!
//! # File formats
//!
//! Activation file (`.mact`), all integers and floats little-endian:
//!
//! ```text
//! b"MACT" | version: u16 | L: u32 | T: u32 | n: u32 | H: u32 | L*n*H f32 in [layer][position][dim] order
//! ```
//!
//! Weights file (`.mwts`):
//!
//! ```text
//! b"MWTS" | version: u16 | L: u32 | T: u32 | H: u32 | V: u32 | heads: u32 | tensors
//! ```
//!
//! Tensors follow in this order, each row-major with matrices stored as
//! `[in][out]`: token embedding `V×H`, position embedding `T×H`, then per
//! layer `ln1_gain[H]`, `ln1_bias[H]`, `w_q`, `w_k`, `w_v`, `w_o` (`H×H`),
//! `ln2_gain[H]`, `ln2_bias[H]`, `w_fc[H×4H]`, `b_fc[4H]`, `w_proj[4H×H]`,
//! `b_proj[H]`, and finally `final_gain[H]`, `final_bias[H]`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::XorShift64Star;

pub const ACTIVATION_MAGIC: &[u8; 4] = b"MACT";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"MWTS";
pub const EMBEDDING_MAGIC: &[u8; 4] = b"MEMB";
pub const FORMAT_VERSION: u16 = 1;
pub const INIT_SCALE: f32 = 0.02;
const LN_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model shape: {0}")]
    InvalidShape(String),
    #[error("sequence of {len} tokens exceeds context length {context}")]
    SequenceTooLong { len: usize, context: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("bad magic {found:02x?}, expected {expected:?}")]
    BadMagic {
        found: [u8; 4],
        expected: &'static str,
    },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub context: usize,
    pub dim: usize,
    pub vocab: usize,
    pub heads: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0
            || self.context == 0
            || self.dim == 0
            || self.vocab == 0
            || self.heads == 0
        {
            return Err(ModelError::InvalidShape(format!(
                "all fields must be positive: {self:?}"
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::InvalidShape(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.dim
    }

    pub fn activation_shape(&self) -> ActivationShape {
        ActivationShape {
            layers: self.layers,
            context: self.context,
            dim: self.dim,
        }
    }
}

/// The part of a model shape that an activation tensor records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationShape {
    pub layers: usize,
    pub context: usize,
    pub dim: usize,
}

/// Hidden states `[layer][position][dim]` for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    shape: ActivationShape,
    seq_len: usize,
    data: Vec<f32>,
}

impl LayerActivations {
    pub fn new(shape: ActivationShape, seq_len: usize, data: Vec<f32>) -> Result<Self, ModelError> {
        if shape.layers == 0 || shape.context == 0 || shape.dim == 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "degenerate shape {shape:?}"
            )));
        }
        if seq_len == 0 || seq_len > shape.context {
            return Err(ModelError::ShapeMismatch(format!(
                "sequence length {seq_len} outside 1..={}",
                shape.context
            )));
        }
        let expected = shape.layers * seq_len * shape.dim;
        if data.len() != expected {
            return Err(ModelError::ShapeMismatch(format!(
                "{} values for {expected} slots",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(ModelError::ShapeMismatch(format!("non-finite value {bad}")));
        }
        Ok(Self {
            shape,
            seq_len,
            data,
        })
    }

    pub fn shape(&self) -> ActivationShape {
        self.shape
    }

    pub fn layers(&self) -> usize {
        self.shape.layers
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn dim(&self) -> usize {
        self.shape.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Hidden vector at zero-based `layer` and `position`.
    pub fn vector(&self, layer: usize, position: usize) -> &[f32] {
        let h = self.shape.dim;
        let start = (layer * self.seq_len + position) * h;
        &self.data[start..start + h]
    }

    /// Multiply every value by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            shape: self.shape,
            seq_len: self.seq_len,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub w_q: Vec<f32>,
    pub w_k: Vec<f32>,
    pub w_v: Vec<f32>,
    pub w_o: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub w_fc: Vec<f32>,
    pub b_fc: Vec<f32>,
    pub w_proj: Vec<f32>,
    pub b_proj: Vec<f32>,
}

impl LayerWeights {
    fn tensors(&self) -> [&Vec<f32>; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_fc,
            &self.b_fc,
            &self.w_proj,
            &self.b_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f32>; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }

    fn zeroed(shape: &ModelShape) -> Self {
        let h = shape.dim;
        let f = shape.ffn_dim();
        Self {
            ln1_gain: vec![1.0; h],
            ln1_bias: vec![0.0; h],
            w_q: vec![0.0; h * h],
            w_k: vec![0.0; h * h],
            w_v: vec![0.0; h * h],
            w_o: vec![0.0; h * h],
            ln2_gain: vec![1.0; h],
            ln2_bias: vec![0.0; h],
            w_fc: vec![0.0; h * f],
            b_fc: vec![0.0; f],
            w_proj: vec![0.0; f * h],
            b_proj: vec![0.0; h],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub shape: ModelShape,
    pub token_embedding: Vec<f32>,
    pub position_embedding: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Vec<f32>,
    pub final_bias: Vec<f32>,
}

/// Which hidden state is reported for the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerReadout {
    /// Every layer reports its residual-stream output; the last layer is
    /// passed through the final layer norm.
    #[default]
    FinalNormOnLast,
    /// Every layer, including the last, reports the raw residual stream.
    Residual,
}

impl ModelWeights {
    /// Identity layer norms, zero everything else.
    pub fn zeroed(shape: ModelShape) -> Result<Self, ModelError> {
        shape.validate()?;
        let h = shape.dim;
        Ok(Self {
            shape,
            token_embedding: vec![0.0; shape.vocab * h],
            position_embedding: vec![0.0; shape.context * h],
            layers: (0..shape.layers)
                .map(|_| LayerWeights::zeroed(&shape))
                .collect(),
            final_gain: vec![1.0; h],
            final_bias: vec![0.0; h],
        })
    }

    /// Gaussian init with standard deviation [`INIT_SCALE`] for embeddings
    /// and projection matrices, drawn from one [`XorShift64Star`] stream in
    /// file order; gains are one and biases zero.
    pub fn random(shape: ModelShape, seed: u64) -> Result<Self, ModelError> {
        let mut w = Self::zeroed(shape)?;
        let mut rng = XorShift64Star::new(seed);
        let mut fill = |t: &mut Vec<f32>| {
            for v in t.iter_mut() {
                *v = (rng.next_gaussian() as f32) * INIT_SCALE;
            }
        };
        fill(&mut w.token_embedding);
        fill(&mut w.position_embedding);
        for layer in &mut w.layers {
            fill(&mut layer.w_q);
            fill(&mut layer.w_k);
            fill(&mut layer.w_v);
            fill(&mut layer.w_o);
            fill(&mut layer.w_fc);
            fill(&mut layer.w_proj);
        }
        Ok(w)
    }

    fn tensors(&self) -> Vec<&Vec<f32>> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.push(&self.final_gain);
        out.push(&self.final_bias);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<(), ModelError> {
        let s = &self.shape;
        let mut buf = Vec::with_capacity(26 + self.parameter_count() * 4);
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [s.layers, s.context, s.dim, s.vocab, s.heads] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for t in self.tensors() {
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        sink.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut source: R) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        let fields = read_header(&bytes, WEIGHTS_MAGIC, "MWTS", 5)?;
        let shape = ModelShape {
            layers: fields[0],
            context: fields[1],
            dim: fields[2],
            vocab: fields[3],
            heads: fields[4],
        };
        shape
            .validate()
            .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
        let mut w = Self::zeroed(shape)?;
        let payload = &bytes[26..];
        let expected = w.parameter_count() * 4;
        check_payload(payload.len(), expected)?;
        let mut chunks = payload.chunks_exact(4);
        for t in w.tensors_mut() {
            for v in t.iter_mut() {
                let c = chunks.next().expect("length checked");
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        Ok(w)
    }
}

fn read_header(
    bytes: &[u8],
    magic: &[u8; 4],
    name: &'static str,
    nfields: usize,
) -> Result<Vec<usize>, ModelError> {
    let header_len = 6 + 4 * nfields;
    if bytes.len() < 4 {
        return Err(ModelError::TruncatedPayload {
            expected: header_len,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != magic {
        return Err(ModelError::BadMagic {
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
            expected: name,
        });
    }
    if bytes.len() < header_len {
        return Err(ModelError::TruncatedPayload {
            expected: header_len,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    Ok((0..nfields)
        .map(|i| {
            let o = 6 + 4 * i;
            u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect())
}

fn check_payload(found: usize, expected: usize) -> Result<(), ModelError> {
    if found < expected {
        return Err(ModelError::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(ModelError::ShapeMismatch(format!(
            "{} trailing bytes after payload",
            found - expected
        )));
    }
    Ok(())
}

pub fn write_activations<W: Write>(acts: &LayerActivations, mut sink: W) -> Result<(), ModelError> {
    let s = acts.shape;
    let mut buf = Vec::with_capacity(22 + acts.data.len() * 4);
    buf.extend_from_slice(ACTIVATION_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [s.layers, s.context, acts.seq_len, s.dim] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &acts.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(())
}

pub fn read_activations<R: Read>(mut source: R) -> Result<LayerActivations, ModelError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let f = read_header(&bytes, ACTIVATION_MAGIC, "MACT", 4)?;
    let (layers, context, seq_len, dim) = (f[0], f[1], f[2], f[3]);
    if layers == 0 || context == 0 || dim == 0 || seq_len == 0 || seq_len > context {
        return Err(ModelError::ShapeMismatch(format!(
            "header L={layers} T={context} n={seq_len} H={dim}"
        )));
    }
    let payload = &bytes[22..];
    check_payload(payload.len(), layers * seq_len * dim * 4)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    LayerActivations::new(
        ActivationShape {
            layers,
            context,
            dim,
        },
        seq_len,
        data,
    )
}

/// Sentence embeddings as `"MEMB"`, version, count, H, then `count × H`
/// little-endian f32 values.
pub fn write_embeddings<W: Write>(vectors: &[Vec<f64>], mut sink: W) -> Result<(), ModelError> {
    let dim = vectors.first().map_or(0, Vec::len);
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(ModelError::ShapeMismatch(format!(
            "embedding of length {} among length {dim}",
            v.len()
        )));
    }
    let mut buf = Vec::with_capacity(14 + vectors.len() * dim * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [vectors.len(), dim] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for x in vectors.iter().flatten() {
        buf.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(())
}

pub fn read_embeddings<R: Read>(mut source: R) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let f = read_header(&bytes, EMBEDDING_MAGIC, "MEMB", 2)?;
    let (count, dim) = (f[0], f[1]);
    let payload = &bytes[14..];
    check_payload(payload.len(), count * dim * 4)?;
    if dim == 0 {
        return Ok(vec![Vec::new(); count]);
    }
    Ok(payload[..count * dim * 4]
        .chunks_exact(dim * 4)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Forward pass

fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32]) -> Vec<f32> {
    let h = x.len() as f32;
    let mut sum = 0.0f32;
    for &v in x {
        sum += v;
    }
    let mean = sum / h;
    let mut var = 0.0f32;
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    let inv = 1.0 / (var / h + LN_EPS).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
        .collect()
}

/// `x · w` with `w` stored `[in][out]`; sums run over `in` in order.
fn matvec(x: &[f32], w: &[f32], out_dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; out_dim];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out_dim..(i + 1) * out_dim];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn forward(ids: &[u32], weights: &ModelWeights) -> Result<LayerActivations, ModelError> {
    forward_with(ids, weights, LayerReadout::default())
}

pub fn forward_with(
    ids: &[u32],
    weights: &ModelWeights,
    readout: LayerReadout,
) -> Result<LayerActivations, ModelError> {
    let shape = weights.shape;
    let (h, n) = (shape.dim, ids.len());
    if n == 0 {
        return Err(ModelError::EmptySequence);
    }
    if n > shape.context {
        return Err(ModelError::SequenceTooLong {
            len: n,
            context: shape.context,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= shape.vocab) {
        return Err(ModelError::IdOutOfRange {
            id,
            vocab: shape.vocab,
        });
    }

    let head_dim = h / shape.heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let ffn = shape.ffn_dim();

    let mut x: Vec<Vec<f32>> = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            let tok = &weights.token_embedding[id as usize * h..(id as usize + 1) * h];
            let pos = &weights.position_embedding[t * h..(t + 1) * h];
            tok.iter().zip(pos).map(|(a, b)| a + b).collect()
        })
        .collect();

    let mut data = Vec::with_capacity(shape.layers * n * h);
    for (li, lw) in weights.layers.iter().enumerate() {
        let normed: Vec<Vec<f32>> = x
            .iter()
            .map(|v| layer_norm(v, &lw.ln1_gain, &lw.ln1_bias))
            .collect();
        let q: Vec<Vec<f32>> = normed.iter().map(|v| matvec(v, &lw.w_q, h)).collect();
        let k: Vec<Vec<f32>> = normed.iter().map(|v| matvec(v, &lw.w_k, h)).collect();
        let v: Vec<Vec<f32>> = normed.iter().map(|v| matvec(v, &lw.w_v, h)).collect();

        for i in 0..n {
            let mut attended = vec![0.0f32; h];
            for head in 0..shape.heads {
                let r = head * head_dim..(head + 1) * head_dim;
                let scores: Vec<f32> = (0..=i)
                    .map(|j| {
                        let mut dot = 0.0f32;
                        for d in r.clone() {
                            dot += q[i][d] * k[j][d];
                        }
                        dot * scale
                    })
                    .collect();
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = scores.iter().map(|s| (s - max).exp()).collect();
                let mut total = 0.0f32;
                for &e in &exps {
                    total += e;
                }
                for (j, &e) in exps.iter().enumerate() {
                    let p = e / total;
                    for d in r.clone() {
                        attended[d] += p * v[j][d];
                    }
                }
            }
            let projected = matvec(&attended, &lw.w_o, h);
            for (xv, pv) in x[i].iter_mut().zip(projected) {
                *xv += pv;
            }
        }

        for xi in x.iter_mut() {
            let normed = layer_norm(xi, &lw.ln2_gain, &lw.ln2_bias);
            let mut hidden = matvec(&normed, &lw.w_fc, ffn);
            for (hv, b) in hidden.iter_mut().zip(&lw.b_fc) {
                *hv = gelu(*hv + b);
            }
            let out = matvec(&hidden, &lw.w_proj, h);
            for ((xv, ov), b) in xi.iter_mut().zip(out).zip(&lw.b_proj) {
                *xv += ov + b;
            }
        }

        let last = li + 1 == shape.layers;
        for xi in &x {
            if last && readout == LayerReadout::FinalNormOnLast {
                data.extend(layer_norm(xi, &weights.final_gain, &weights.final_bias));
            } else {
                data.extend_from_slice(xi);
            }
        }
    }
    LayerActivations::new(shape.activation_shape(), n, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_shape() -> ModelShape {
        ModelShape {
            layers: 3,
            context: 8,
            dim: 16,
            vocab: 50,
            heads: 4,
        }
    }

    #[test]
    fn shape_validation() {
        let mut s = small_shape();
        assert!(s.validate().is_ok());
        s.heads = 5;
        assert!(matches!(s.validate(), Err(ModelError::InvalidShape(_))));
    }

    #[test]
    fn single_token_shape() {
        let w = ModelWeights::random(small_shape(), 1).unwrap();
        let acts = forward(&[7], &w).unwrap();
        assert_eq!((acts.layers(), acts.seq_len(), acts.dim()), (3, 1, 16));
    }

    #[test]
    fn input_errors() {
        let w = ModelWeights::random(small_shape(), 1).unwrap();
        assert!(matches!(forward(&[], &w), Err(ModelError::EmptySequence)));
        assert!(matches!(
            forward(&[1; 9], &w),
            Err(ModelError::SequenceTooLong { len: 9, context: 8 })
        ));
        assert!(matches!(
            forward(&[1, 50], &w),
            Err(ModelError::IdOutOfRange { id: 50, vocab: 50 })
        ));
    }

    #[test]
    fn random_weights_determinism() {
        let a = ModelWeights::random(small_shape(), 9).unwrap();
        let b = ModelWeights::random(small_shape(), 9).unwrap();
        let c = ModelWeights::random(small_shape(), 10).unwrap();
        let (mut ba, mut bb, mut bc) = (Vec::new(), Vec::new(), Vec::new());
        a.write_to(&mut ba).unwrap();
        b.write_to(&mut bb).unwrap();
        c.write_to(&mut bc).unwrap();
        assert_eq!(ba, bb);
        assert_ne!(ba, bc);
        assert_ne!(a.token_embedding[0], c.token_embedding[0]);
    }

    #[test]
    fn readout_modes_differ_only_on_last_layer() {
        let w = ModelWeights::random(small_shape(), 2).unwrap();
        let ids = [1, 2, 3, 4];
        let a = forward_with(&ids, &w, LayerReadout::FinalNormOnLast).unwrap();
        let b = forward_with(&ids, &w, LayerReadout::Residual).unwrap();
        for l in 0..2 {
            for t in 0..4 {
                assert_eq!(a.vector(l, t), b.vector(l, t));
            }
        }
        assert_ne!(a.vector(2, 0), b.vector(2, 0));
        // The final norm leaves a zero-mean, unit-variance vector.
        let v = a.vector(2, 3);
        let mean: f32 = v.iter().sum::<f32>() / 16.0;
        assert!(mean.abs() < 1e-5);
    }

    #[test]
    fn forward_is_deterministic() {
        let w = ModelWeights::random(small_shape(), 4).unwrap();
        let ids = [3, 1, 4, 1, 5, 9, 2, 6];
        assert_eq!(forward(&ids, &w).unwrap(), forward(&ids, &w).unwrap());
    }

    #[test]
    fn activation_file_roundtrip() {
        let w = ModelWeights::random(small_shape(), 4).unwrap();
        let acts = forward(&[1, 2, 3], &w).unwrap();
        let mut buf = Vec::new();
        write_activations(&acts, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"MACT");
        assert_eq!(buf.len(), 22 + 3 * 3 * 16 * 4);
        assert_eq!(read_activations(buf.as_slice()).unwrap(), acts);
    }

    #[test]
    fn activation_file_errors() {
        // Header for L=12, T=8, n=8, H=16 with a short payload.
        let mut buf = b"MACT".to_vec();
        buf.extend_from_slice(&1u16.to_le_bytes());
        for v in [12u32, 8, 8, 16] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&[0u8; 100]);
        assert!(matches!(
            read_activations(buf.as_slice()),
            Err(ModelError::TruncatedPayload { .. })
        ));

        let mut be = buf.clone();
        be[..4].copy_from_slice(b"TCAM");
        assert!(matches!(
            read_activations(be.as_slice()),
            Err(ModelError::BadMagic { .. })
        ));

        let mut long_seq = buf.clone();
        long_seq[14..18].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            read_activations(long_seq.as_slice()),
            Err(ModelError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn weights_file_roundtrip() {
        let w = ModelWeights::random(small_shape(), 11).unwrap();
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        assert_eq!(ModelWeights::read_from(buf.as_slice()).unwrap(), w);
        buf.truncate(buf.len() - 1);
        assert!(matches!(
            ModelWeights::read_from(buf.as_slice()),
            Err(ModelError::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn embedding_dump_round_trip() {
        let vectors = vec![vec![1.0, -0.5, 0.25], vec![0.0, 2.0, 3.5]];
        let mut buf = Vec::new();
        write_embeddings(&vectors, &mut buf).unwrap();
        assert_eq!(buf.len(), 14 + 6 * 4);
        assert_eq!(&buf[..4], b"MEMB");
        assert_eq!(read_embeddings(&buf[..]).unwrap(), vectors);
        assert!(matches!(
            read_embeddings(&buf[..buf.len() - 1]),
            Err(ModelError::TruncatedPayload { .. })
        ));
        assert!(write_embeddings(&[vec![1.0], vec![1.0, 2.0]], Vec::new()).is_err());
    }
}
