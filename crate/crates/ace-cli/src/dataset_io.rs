//! On-disk dataset directory format.
//!
//! A dataset directory contains:
//! - `manifest.json` — `{"n_samples", "height", "width", "channels",
//!   "n_concepts", "n_classes"}`
//! - `images.bin` — little-endian 32-bit floats, sample-major, then
//!   row-major, channel-last
//! - `concepts.csv` — one row per sample of comma-separated 0/1 bits
//! - `labels.csv` — one class id per row
//!
//! Pixel data is stored as `f32`; the in-memory pipeline quantizes generated
//! pixels to `f32` up front, so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use ace_core::data::{Dataset, Sample};
use ace_core::Image;
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_concepts: usize,
    pub n_classes: usize,
}

/// Writes `dataset` to `dir`, creating the directory if needed.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating dataset directory {}", dir.display()))?;
    let (height, width, channels) = dataset.dims();
    let manifest = Manifest {
        n_samples: dataset.len(),
        height,
        width,
        channels,
        n_concepts: dataset.n_concepts(),
        n_classes: dataset.n_classes(),
    };
    let manifest_json =
        serde_json::to_vec_pretty(&manifest).context("serializing manifest.json")?;
    fs::write(dir.join("manifest.json"), manifest_json).context("writing manifest.json")?;

    let mut blob = Vec::with_capacity(dataset.len() * height * width * channels * 4);
    for sample in dataset.samples() {
        for &p in sample.image.pixels() {
            blob.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    fs::write(dir.join("images.bin"), blob).context("writing images.bin")?;

    let mut concepts = String::new();
    for sample in dataset.samples() {
        let row: Vec<String> = sample.concepts.iter().map(|b| b.to_string()).collect();
        concepts.push_str(&row.join(","));
        concepts.push('\n');
    }
    fs::write(dir.join("concepts.csv"), concepts).context("writing concepts.csv")?;

    let mut labels = String::new();
    for sample in dataset.samples() {
        labels.push_str(&sample.class_id.to_string());
        labels.push('\n');
    }
    fs::write(dir.join("labels.csv"), labels).context("writing labels.csv")?;
    Ok(())
}

/// Loads a dataset directory, validating every manifest-declared count and
/// every sample invariant.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest_bytes = fs::read(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .with_context(|| format!("parsing {}", manifest_path.display()))?;

    let pixels_per_sample = manifest
        .height
        .checked_mul(manifest.width)
        .and_then(|v| v.checked_mul(manifest.channels))
        .ok_or_else(|| anyhow!("manifest.json: image dimensions overflow"))?;
    let expected_bytes = manifest
        .n_samples
        .checked_mul(pixels_per_sample)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| anyhow!("manifest.json: sample count overflows blob size"))?;

    let blob = fs::read(dir.join("images.bin")).context("reading images.bin")?;
    if blob.len() != expected_bytes {
        bail!(
            "images.bin is truncated or padded: manifest implies {expected_bytes} bytes \
             ({} samples of {pixels_per_sample} pixels), found {} bytes",
            manifest.n_samples,
            blob.len()
        );
    }

    let concepts_text = fs::read_to_string(dir.join("concepts.csv")).context("reading concepts.csv")?;
    let concept_rows: Vec<&str> = concepts_text.lines().collect();
    if concept_rows.len() != manifest.n_samples {
        bail!(
            "sample count mismatch: manifest.json declares {} samples but concepts.csv \
             holds {} rows",
            manifest.n_samples,
            concept_rows.len()
        );
    }

    let labels_text = fs::read_to_string(dir.join("labels.csv")).context("reading labels.csv")?;
    let label_rows: Vec<&str> = labels_text.lines().collect();
    if label_rows.len() != manifest.n_samples {
        bail!(
            "sample count mismatch: manifest.json declares {} samples but labels.csv \
             holds {} rows",
            manifest.n_samples,
            label_rows.len()
        );
    }

    let mut samples = Vec::with_capacity(manifest.n_samples);
    for i in 0..manifest.n_samples {
        let start = i * pixels_per_sample * 4;
        let pixel_bytes = &blob[start..start + pixels_per_sample * 4];
        let pixels: Vec<f64> = pixel_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let image = Image::new(manifest.height, manifest.width, manifest.channels, pixels)
            .map_err(|e| anyhow!("images.bin: sample {i}: {e}"))?;

        let mut concepts = Vec::with_capacity(manifest.n_concepts);
        for field in concept_rows[i].split(',') {
            match field.trim() {
                "0" => concepts.push(0u8),
                "1" => concepts.push(1u8),
                other => bail!(
                    "concepts.csv: row {i}: value {other:?} is not a binary concept bit"
                ),
            }
        }
        if concepts.len() != manifest.n_concepts {
            bail!(
                "concepts.csv: row {i} holds {} bits but manifest.json declares {} concepts",
                concepts.len(),
                manifest.n_concepts
            );
        }

        let class_id: usize = label_rows[i]
            .trim()
            .parse()
            .map_err(|_| anyhow!("labels.csv: row {i}: {:?} is not a class id", label_rows[i]))?;

        samples.push(Sample {
            image,
            concepts,
            class_id,
        });
    }

    Dataset::new(samples, manifest.n_classes, manifest.n_concepts)
        .map_err(|e| anyhow!("dataset directory {} fails validation: {e}", dir.display()))
}
