//! TOML configuration loading.
//!
//! Experiment configs are partial: any omitted field falls back to the
//! default set for the chosen backbone (`centroid_softmax` or `knn`), so a
//! config file only needs to state what it changes. Unknown keys are
//! rejected rather than silently ignored.

use std::fs;
use std::path::Path;

use ace_core::harness::{Backbone, ClassSelection, ExperimentConfig};
use ace_core::SyntheticSpec;
use anyhow::{bail, Context, Result};
use serde::Deserialize;

/// A partially-specified experiment config as it appears on disk.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub backbone: Option<Backbone>,
    pub alpha: Option<f64>,
    pub margin_d: Option<f64>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub rotations: Option<Vec<u8>>,
    pub flips: Option<Vec<bool>>,
    pub shift_magnitude: Option<u32>,
    pub shifts: Option<Vec<(i32, i32)>>,
    pub hidden_sizes: Option<Vec<usize>>,
    pub feature_dim: Option<usize>,
    pub train_fraction: Option<f64>,
    pub concept_fraction: Option<f64>,
    pub seeds: Option<Vec<u64>>,
    pub k_ind: Option<ClassSelection>,
    pub knn_k: Option<usize>,
}

impl ConfigFile {
    /// Resolves the partial file against backbone-dependent defaults and
    /// validates the result.
    pub fn resolve(self) -> Result<ExperimentConfig> {
        let backbone = self.backbone.unwrap_or(Backbone::CentroidSoftmax);
        let mut cfg = match backbone {
            Backbone::CentroidSoftmax => ExperimentConfig::default(),
            Backbone::Knn => ExperimentConfig::knn_defaults(),
        };
        cfg.backbone = backbone;
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.margin_d {
            cfg.margin_d = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.rotations {
            cfg.rotations = v;
        }
        if let Some(v) = self.flips {
            cfg.flips = v;
        }
        if let Some(v) = self.shift_magnitude {
            cfg.shift_magnitude = Some(v);
        }
        if let Some(v) = self.shifts {
            cfg.shifts = Some(v);
        }
        if let Some(v) = self.hidden_sizes {
            cfg.hidden_sizes = v;
        }
        if let Some(v) = self.feature_dim {
            cfg.feature_dim = v;
        }
        if let Some(v) = self.train_fraction {
            cfg.train_fraction = v;
        }
        if let Some(v) = self.concept_fraction {
            cfg.concept_fraction = v;
        }
        if let Some(v) = self.seeds {
            cfg.seeds = v;
        }
        if let Some(v) = self.k_ind {
            cfg.k_ind = v;
        }
        if let Some(v) = self.knn_k {
            cfg.knn_k = v;
        }
        cfg.validate().map_err(|e| anyhow::anyhow!("invalid experiment config: {e}"))?;
        Ok(cfg)
    }
}

/// Loads and resolves an experiment config from a TOML file.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let file: ConfigFile = toml::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    file.resolve()
        .with_context(|| format!("resolving config {}", path.display()))
}

/// A synthetic-dataset spec as it appears on disk. All fields are required
/// except `noise_std` (default 0.25) and `seed` (default 0).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    image_size: usize,
    n_classes: usize,
    n_concepts: usize,
    samples_per_class: usize,
    noise_std: Option<f64>,
    seed: Option<u64>,
}

/// Loads a synthetic-dataset generation spec from a TOML file.
pub fn load_synthetic_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading dataset spec {}", path.display()))?;
    let file: SpecFile = toml::from_str(&text)
        .with_context(|| format!("parsing dataset spec {}", path.display()))?;
    if file.image_size == 0 || file.n_classes == 0 || file.n_concepts == 0
        || file.samples_per_class == 0
    {
        bail!(
            "dataset spec {} has a zero dimension; image_size, n_classes, n_concepts, \
             and samples_per_class must all be positive",
            path.display()
        );
    }
    let noise_std = file.noise_std.unwrap_or(0.25);
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        bail!("dataset spec {}: noise_std must be finite and non-negative", path.display());
    }
    Ok(SyntheticSpec {
        image_size: file.image_size,
        n_classes: file.n_classes,
        n_concepts: file.n_concepts,
        samples_per_class: file.samples_per_class,
        noise_std,
        seed: file.seed.unwrap_or(0),
    })
}
