//! TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use simcal_core::eval::PValueMethod;
use simcal_core::model::LayerReadout;
use simcal_core::rng::derive_seed;
use simcal_core::{
    CalibrationOptions, ExclusionPolicy, GridSpec, PipelineOrder, TokenizerConfig, Weighting,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; module seeds not given explicitly derive from it.
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub vocab: VocabSection,
    pub model: ModelSection,
    pub sampler: SamplerSection,
    #[serde(default)]
    pub grid: GridSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
    /// Set when `--seed` overrides the file: explicit module seeds are then
    /// ignored.
    #[serde(skip)]
    pub seed_overridden: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub target_size: usize,
    pub max_word_events: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self {
            target_size: 2000,
            max_word_events: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub context: usize,
    pub dim: usize,
    pub heads: usize,
    /// Load weights from this file instead of seeded random initialization.
    #[serde(default)]
    pub weights_file: Option<PathBuf>,
    #[serde(default)]
    pub weights_seed: Option<u64>,
    #[serde(default)]
    pub readout: LayerReadout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub window: usize,
    /// Defaults to half a window.
    #[serde(default)]
    pub stride: Option<usize>,
    pub positives: usize,
    pub negatives: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub exclusion: ExclusionPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Defaults to `0..=layers`.
    pub layer_avg: Option<Vec<usize>>,
    pub sn: Vec<bool>,
    pub natsv: Vec<usize>,
    pub weightings: Vec<Weighting>,
    pub natsv_center: bool,
    pub order: PipelineOrder,
    pub p_value: PValueMethod,
    pub svg: bool,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            layer_avg: None,
            sn: vec![false, true],
            natsv: vec![0, 1, 2],
            weightings: Weighting::ALL.to_vec(),
            natsv_center: true,
            order: PipelineOrder::SnThenNatsv,
            p_value: PValueMethod::TDistribution,
            svg: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).context("parsing run config")?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base).with_context(|| format!("in {}", path.display()))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolve(&self.paths.manifest)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.paths.out_dir)
    }

    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.seed_overridden = true;
    }

    fn module_seed(&self, explicit: Option<u64>, module: &str) -> u64 {
        match explicit {
            Some(s) if !self.seed_overridden => s,
            _ => derive_seed(self.seed, module),
        }
    }

    pub fn model_seed(&self) -> u64 {
        self.module_seed(self.model.weights_seed, "model")
    }

    pub fn sampler_seed(&self) -> u64 {
        self.module_seed(self.sampler.seed, "pairs")
    }

    pub fn stride(&self) -> usize {
        self.sampler.stride.unwrap_or(self.sampler.window / 2)
    }

    pub fn grid_spec(&self, layers: usize) -> GridSpec {
        let p_value = match self.grid.p_value {
            PValueMethod::Permutation { trials, seed } => PValueMethod::Permutation {
                trials,
                seed: self.module_seed(Some(seed), "eval"),
            },
            other => other,
        };
        GridSpec {
            layer_avg: self
                .grid
                .layer_avg
                .clone()
                .unwrap_or_else(|| (0..=layers).collect()),
            sn: self.grid.sn.clone(),
            natsv: self.grid.natsv.clone(),
            weightings: self.grid.weightings.clone(),
            options: CalibrationOptions {
                natsv_center: self.grid.natsv_center,
                order: self.grid.order,
            },
            p_value,
        }
    }

    /// Checks that need no pipeline output. `needs_manifest` also requires
    /// the corpus manifest to exist.
    pub fn validate(&self, needs_manifest: bool) -> Result<()> {
        self.tokenizer.validate()?;
        let base = self.tokenizer.base_vocab_size();
        ensure!(
            self.vocab.target_size >= base,
            "vocab.target_size {} is below the {base} single events",
            self.vocab.target_size
        );
        ensure!(
            self.vocab.max_word_events >= 1,
            "vocab.max_word_events must be >= 1"
        );
        let m = &self.model;
        ensure!(
            m.layers > 0 && m.context > 0 && m.dim > 0 && m.heads > 0,
            "model layers, context, dim and heads must be positive"
        );
        ensure!(
            m.dim % m.heads == 0,
            "model.dim {} is not divisible by model.heads {}",
            m.dim,
            m.heads
        );
        if let Some(w) = &m.weights_file {
            ensure!(
                m.weights_seed.is_none(),
                "give weights_file or weights_seed, not both"
            );
            let path = self.resolve(w);
            ensure!(
                path.is_file(),
                "weights file {} does not exist",
                path.display()
            );
        }
        let s = &self.sampler;
        ensure!(s.window >= 1, "sampler.window must be >= 1");
        ensure!(self.stride() >= 1, "sampler.stride must be >= 1");
        ensure!(
            s.window <= m.context,
            "sampler.window {} exceeds model.context {}",
            s.window,
            m.context
        );
        ensure!(
            s.positives >= 1 && s.negatives >= 1,
            "sampler.positives and sampler.negatives must be >= 1"
        );
        self.grid_spec(m.layers).validate(m.layers)?;
        if let PValueMethod::Permutation { trials, .. } = self.grid.p_value {
            ensure!(trials >= 1, "permutation p-value needs at least one trial");
        }
        if needs_manifest {
            let path = self.manifest_path();
            if !path.is_file() {
                bail!("corpus manifest {} does not exist", path.display());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7

[paths]
manifest = "manifest.csv"
out_dir = "out"

[model]
layers = 2
context = 16
dim = 8
heads = 2

[sampler]
window = 8
positives = 10
negatives = 10
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(cfg.vocab.target_size, 2000);
        assert_eq!(cfg.tokenizer, TokenizerConfig::default());
        assert_eq!(cfg.stride(), 4);
        assert_eq!(cfg.out_dir(), PathBuf::from("/base/out"));
        assert_eq!(
            cfg.grid_spec(2).enumerate().len(),
            3 * 2 * 3 + 2 * 2 * 2 * 3
        );
        cfg.validate(false).unwrap();
        assert!(cfg.validate(true).is_err());
    }

    #[test]
    fn seeds_derive_and_override() {
        let mut cfg = RunConfig::from_toml(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(cfg.model_seed(), derive_seed(7, "model"));
        assert_ne!(cfg.model_seed(), cfg.sampler_seed());
        cfg.sampler.seed = Some(99);
        assert_eq!(cfg.sampler_seed(), 99);
        cfg.override_seed(8);
        assert_eq!(cfg.sampler_seed(), derive_seed(8, "pairs"));
    }

    #[test]
    fn rejects_bad_configs() {
        let unknown = format!("{MINIMAL}\n[extra]\nx = 1\n");
        assert!(RunConfig::from_toml(&unknown, Path::new(".")).is_err());

        let mut cfg = RunConfig::from_toml(MINIMAL, Path::new(".")).unwrap();
        cfg.sampler.window = 32;
        assert!(cfg.validate(false).is_err());

        let mut cfg = RunConfig::from_toml(MINIMAL, Path::new(".")).unwrap();
        cfg.model.heads = 3;
        assert!(cfg.validate(false).is_err());

        let mut cfg = RunConfig::from_toml(MINIMAL, Path::new(".")).unwrap();
        cfg.grid.layer_avg = Some(vec![5]);
        assert!(cfg.validate(false).is_err());
    }
}
