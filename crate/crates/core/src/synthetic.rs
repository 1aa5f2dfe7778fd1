//! Activation corpora with planted composer structure.
//!
//! Each composer gets a mean direction in the leading `signal_dims`
//! coordinates. A window's sentence vector is its composer mean plus small
//! isotropic noise, plus large independent noise on the remaining
//! coordinates, plus a high-variance component along the last coordinate
//! shared by every composer. Per-token activations scatter around the
//! window vector, more so in earlier layers.
//!
//! Without normalization the shared component dominates cosine similarity,
//! so removing one principal direction helps; per-dimension normalization
//! additionally shrinks the noisy coordinates.

use serde::{Deserialize, Serialize};

use crate::model::{ActivationShape, LayerActivations, ModelError};
use crate::pairs::{Window, WindowRef};
use crate::rng::XorShift64Star;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub composers: usize,
    pub pieces_per_composer: usize,
    pub windows_per_piece: usize,
    pub layers: usize,
    pub seq_len: usize,
    pub dim: usize,
    /// Norm of every composer mean.
    pub separation: f64,
    /// Variance of the shared component in units of `separation²`.
    pub nuisance_variance: f64,
    pub signal_dims: usize,
    pub noise_dim_std: f64,
    pub window_std: f64,
    pub token_std: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            composers: 4,
            pieces_per_composer: 10,
            windows_per_piece: 4,
            layers: 4,
            seq_len: 8,
            dim: 16,
            separation: 1.0,
            nuisance_variance: 10.0,
            signal_dims: 8,
            noise_dim_std: 1.0,
            window_std: 0.1,
            token_std: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedWindow {
    pub reference: WindowRef,
    pub composer_id: String,
    pub activations: LayerActivations,
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub spec: PlantedSpec,
    /// Composer means, one per composer.
    pub means: Vec<Vec<f64>>,
    pub windows: Vec<PlantedWindow>,
}

impl PlantedCorpus {
    pub fn generate(spec: PlantedSpec) -> Result<Self, ModelError> {
        if spec.composers == 0
            || spec.pieces_per_composer == 0
            || spec.windows_per_piece == 0
            || spec.signal_dims == 0
            || spec.signal_dims >= spec.dim
        {
            return Err(ModelError::InvalidShape(format!(
                "planted corpus needs non-empty counts and 0 < signal_dims < dim, got {spec:?}"
            )));
        }
        let (h, l, n) = (spec.dim, spec.layers, spec.seq_len);
        let shape = ActivationShape {
            layers: l,
            context: n,
            dim: h,
        };
        let mut rng = XorShift64Star::new(spec.seed);

        let means: Vec<Vec<f64>> = (0..spec.composers)
            .map(|_| {
                let mut g = vec![0.0; h];
                for x in &mut g[..spec.signal_dims] {
                    *x = rng.next_gaussian();
                }
                let norm = crate::linalg::norm(&g);
                g.iter().map(|x| x * spec.separation / norm).collect()
            })
            .collect();

        let nuisance_std = spec.nuisance_variance.sqrt() * spec.separation;
        let mut windows = Vec::new();
        for (c, mean) in means.iter().enumerate() {
            for p in 0..spec.pieces_per_composer {
                let piece_id = format!("c{c}_p{p:02}");
                for w in 0..spec.windows_per_piece {
                    let mut e: Vec<f64> = mean
                        .iter()
                        .map(|m| m + rng.next_gaussian() * spec.window_std)
                        .collect();
                    for x in &mut e[spec.signal_dims..h - 1] {
                        *x += rng.next_gaussian() * spec.noise_dim_std;
                    }
                    e[h - 1] += rng.next_gaussian() * nuisance_std;

                    let mut data = Vec::with_capacity(l * n * h);
                    for layer in 0..l {
                        let scale = spec.token_std * (1.0 + (l - 1 - layer) as f64 * 0.5);
                        for _ in 0..n {
                            for &x in &e {
                                data.push((x + rng.next_gaussian() * scale) as f32);
                            }
                        }
                    }
                    windows.push(PlantedWindow {
                        reference: WindowRef::new(piece_id.clone(), w),
                        composer_id: format!("c{c}"),
                        activations: LayerActivations::new(shape, n, data)?,
                    });
                }
            }
        }
        Ok(Self {
            spec,
            means,
            windows,
        })
    }

    /// Token-free windows carrying the labels the pair sampler needs.
    pub fn sampler_windows(&self) -> Vec<Window> {
        self.windows
            .iter()
            .map(|w| Window {
                piece_id: w.reference.piece_id.clone(),
                composer_id: w.composer_id.clone(),
                window_index: w.reference.window_index,
                ids: Vec::new(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let spec = PlantedSpec::default();
        let a = PlantedCorpus::generate(spec).unwrap();
        let b = PlantedCorpus::generate(spec).unwrap();
        assert_eq!(a.windows.len(), 160);
        assert_eq!(
            a.windows[0].activations.data(),
            b.windows[0].activations.data()
        );
        for m in &a.means {
            assert!((crate::linalg::norm(m) - 1.0).abs() < 1e-12);
            assert!(m[8..].iter().all(|&x| x == 0.0));
        }
        let c = PlantedCorpus::generate(PlantedSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(
            a.windows[0].activations.data(),
            c.windows[0].activations.data()
        );
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = PlantedSpec {
            signal_dims: 16,
            ..PlantedSpec::default()
        };
        assert!(PlantedCorpus::generate(spec).is_err());
    }
}
