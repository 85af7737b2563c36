//! Datasets: samples, synthetic generation, and one-vs-all splits.
//!
//! The synthetic generator gives every class a distinct binary concept
//! codeword and renders each concept bit as the stripe orientation of a fixed
//! image patch (diagonal stripes for 1, anti-diagonal for 0), plus Gaussian
//! pixel noise. Patterns are axis-anchored on purpose: the bank transforms
//! move them around, which keeps the transformation-classification task
//! non-degenerate, while the concept labels themselves are unaffected.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::{Error, Result};

/// One annotated image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Binary concept annotations, length `n_concepts`.
    pub concepts: Vec<u8>,
    pub class_id: usize,
}

/// An immutable collection of samples with uniform dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    n_classes: usize,
    n_concepts: usize,
}

impl Dataset {
    /// Validates every sample invariant on ingest: uniform image dimensions,
    /// pixels in `[0,1]`, binary concept vectors of the declared length, and
    /// class ids below `n_classes`.
    pub fn new(samples: Vec<Sample>, n_classes: usize, n_concepts: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("dataset has no samples".to_string()));
        }
        if n_classes == 0 || n_concepts == 0 {
            return Err(Error::InvalidArgument(
                "n_classes and n_concepts must be positive".to_string(),
            ));
        }
        let first = &samples[0].image;
        for (i, s) in samples.iter().enumerate() {
            if !s.image.same_dims(first) {
                return Err(Error::ShapeMismatch(format!(
                    "sample {i} is {}x{}x{}, expected {}x{}x{}",
                    s.image.height(),
                    s.image.width(),
                    s.image.channels(),
                    first.height(),
                    first.width(),
                    first.channels()
                )));
            }
            if let Some(&bad) = s
                .image
                .pixels()
                .iter()
                .find(|&&v| !(0.0..=1.0).contains(&v))
            {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has pixel value {bad} outside [0, 1]"
                )));
            }
            if s.concepts.len() != n_concepts {
                return Err(Error::ShapeMismatch(format!(
                    "sample {i} has {} concepts, expected {n_concepts}",
                    s.concepts.len()
                )));
            }
            if let Some(&bad) = s.concepts.iter().find(|&&b| b > 1) {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has non-binary concept value {bad}"
                )));
            }
            if s.class_id >= n_classes {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has class id {} but n_classes is {n_classes}",
                    s.class_id
                )));
            }
        }
        Ok(Dataset {
            samples,
            n_classes,
            n_concepts,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    /// `(height, width, channels)` shared by every sample.
    pub fn dims(&self) -> (usize, usize, usize) {
        let img = &self.samples[0].image;
        (img.height(), img.width(), img.channels())
    }

    /// Indices of all samples of `class_id`, in dataset order.
    pub fn class_indices(&self, class_id: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.class_id == class_id)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Recipe for a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Side length of the square, single-channel images.
    pub image_size: usize,
    pub n_classes: usize,
    pub n_concepts: usize,
    pub samples_per_class: usize,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 {
            return Err(Error::InvalidArgument(format!(
                "image_size must be at least 4, got {}",
                self.image_size
            )));
        }
        if self.n_classes == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidArgument(
                "n_classes and samples_per_class must be positive".to_string(),
            ));
        }
        if self.n_concepts == 0 {
            return Err(Error::InvalidArgument(
                "n_concepts must be positive".to_string(),
            ));
        }
        // Distinct codewords require at least log2(n_classes) concept bits.
        let capacity = 1u128
            .checked_shl(self.n_concepts.min(127) as u32)
            .unwrap_or(u128::MAX);
        if capacity < self.n_classes as u128 {
            return Err(Error::InvalidArgument(format!(
                "{} concepts cannot distinguish {} classes",
                self.n_concepts, self.n_classes
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise_std must be non-negative and finite, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

const STRIPE_BRIGHT: f64 = 0.9;
const STRIPE_DIM: f64 = 0.3;
const BACKGROUND: f64 = 0.1;
const STRIPE_PERIOD: usize = 4;

/// Side length of the patch grid: the smallest square grid with a cell for
/// every concept.
fn patch_grid_side(n_concepts: usize) -> usize {
    let mut g = 1;
    while g * g < n_concepts {
        g += 1;
    }
    g
}

/// Pixel rectangle `(r0, r1, c0, c1)` of concept `index` on the patch grid.
fn patch_rect(index: usize, grid: usize, size: usize) -> (usize, usize, usize, usize) {
    let gi = index / grid;
    let gj = index % grid;
    (
        gi * size / grid,
        (gi + 1) * size / grid,
        gj * size / grid,
        (gj + 1) * size / grid,
    )
}

/// Renders the noise-free class template for a codeword. Bit 1 draws
/// diagonal stripes in that concept's patch, bit 0 anti-diagonal stripes.
fn render_codeword(codeword: &[u8], size: usize) -> Image {
    let grid = patch_grid_side(codeword.len());
    let mut img = Image::zeros(size, size, 1).expect("validated size");
    for v in img.pixels_mut() {
        *v = BACKGROUND;
    }
    for (concept, &bit) in codeword.iter().enumerate() {
        let (r0, r1, c0, c1) = patch_rect(concept, grid, size);
        for r in (r0 + 1)..r1.saturating_sub(1) {
            for c in (c0 + 1)..c1.saturating_sub(1) {
                let phase = if bit == 1 {
                    (r as i64 - c as i64).rem_euclid(STRIPE_PERIOD as i64) as usize
                } else {
                    (r + c) % STRIPE_PERIOD
                };
                let value = if phase < STRIPE_PERIOD / 2 {
                    STRIPE_BRIGHT
                } else {
                    STRIPE_DIM
                };
                img.set(r, c, 0, value);
            }
        }
    }
    img
}

/// Deterministically generates a dataset from a spec.
///
/// Every class receives a distinct random codeword; every sample is the
/// class template plus i.i.d. Gaussian noise, clamped to `[0,1]` and
/// quantized to `f32` precision so that the on-disk format (32-bit floats)
/// round-trips bit-exactly.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut codewords: Vec<Vec<u8>> = Vec::with_capacity(spec.n_classes);
    while codewords.len() < spec.n_classes {
        let candidate: Vec<u8> = (0..spec.n_concepts)
            .map(|_| rng.random_range(0..2u8))
            .collect();
        if !codewords.contains(&candidate) {
            codewords.push(candidate);
        }
    }

    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).map_err(|e| {
            Error::InvalidArgument(format!("invalid noise distribution: {e}"))
        })?)
    } else {
        None
    };

    let mut samples = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    for (class_id, codeword) in codewords.iter().enumerate() {
        let template = render_codeword(codeword, spec.image_size);
        for _ in 0..spec.samples_per_class {
            let mut image = template.clone();
            if let Some(dist) = &noise {
                for v in image.pixels_mut() {
                    *v = (*v + dist.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            for v in image.pixels_mut() {
                *v = *v as f32 as f64;
            }
            samples.push(Sample {
                image,
                concepts: codeword.clone(),
                class_id,
            });
        }
    }
    Dataset::new(samples, spec.n_classes, spec.n_concepts)
}

/// Index-based view of a one-vs-all experiment: train on one class, test on
/// everything held out.
#[derive(Debug, Clone, PartialEq)]
pub struct OneVsAllSplit {
    /// The class treated as normal.
    pub k_ind: usize,
    /// Dataset indices of the training samples (all of class `k_ind`).
    pub train: Vec<usize>,
    /// Dataset indices of the test samples.
    pub test: Vec<usize>,
    /// Anomaly label per test sample: 0 for class `k_ind`, 1 otherwise.
    pub test_labels: Vec<u8>,
}

/// Splits class `k_ind` into train/test by a seeded shuffle and routes every
/// other class entirely to the test set with anomaly label 1.
pub fn one_vs_all_split(
    dataset: &Dataset,
    k_ind: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<OneVsAllSplit> {
    if k_ind >= dataset.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "k_ind {k_ind} out of range for {} classes",
            dataset.n_classes()
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    if dataset.n_classes() < 2 {
        return Err(Error::InvalidArgument(
            "one-vs-all needs at least 2 classes".to_string(),
        ));
    }
    let mut normal = dataset.class_indices(k_ind);
    if normal.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "class {k_ind} has no samples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normal.shuffle(&mut rng);
    let n_train = (train_fraction * normal.len() as f64) as usize;
    if n_train == 0 {
        return Err(Error::InvalidArgument(format!(
            "train_fraction {train_fraction} leaves no training samples for class {k_ind}"
        )));
    }
    let train = normal[..n_train].to_vec();
    let mut test: Vec<usize> = normal[n_train..].to_vec();
    let mut test_labels = alloc::vec![0u8; test.len()];
    for (i, s) in dataset.samples().iter().enumerate() {
        if s.class_id != k_ind {
            test.push(i);
            test_labels.push(1);
        }
    }
    if !test_labels.contains(&0) || !test_labels.contains(&1) {
        return Err(Error::InvalidArgument(format!(
            "split for class {k_ind} does not contain both normal and anomalous test samples"
        )));
    }
    Ok(OneVsAllSplit {
        k_ind,
        train,
        test,
        test_labels,
    })
}
