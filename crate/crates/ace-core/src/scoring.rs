//! Test-time normality scoring.
//!
//! Centroid backbone: every transformed copy of a sample is encoded and
//! soft-assigned to the transformation centroids by a softmax over negative
//! squared distances; the normality score sums the negative log-probability
//! of each copy's own transformation. Higher scores mean more anomalous.
//!
//! kNN backbone: the score is the mean Euclidean distance from the encoded
//! (untransformed) sample to its `k` nearest stored training features.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::image::Image;
use crate::math;
use crate::model::ModelParams;
use crate::objective::Centroids;
use crate::tensor::Tensor;
use crate::transforms::TransformBank;
use crate::{Error, Result};

/// Softmax assignment of one feature vector over centroids: component `m` is
/// `exp(-|f - s_m|^2)` normalized across all centroids.
///
/// Panics if the feature length does not match the centroid width (callers
/// validate shapes up front).
pub fn transform_probabilities(feature: &[f64], centroids: &Centroids) -> Vec<f64> {
    assert_eq!(
        feature.len(),
        centroids.dim(),
        "feature/centroid width mismatch"
    );
    let neg_sq: Vec<f64> = (0..centroids.n_transforms())
        .map(|m| -math::squared_distance(feature, centroids.row(m)))
        .collect();
    math::softmax(&neg_sq)
}

/// Summed negative log-probability that each transformed copy of `image` is
/// assigned its own transformation. Low for in-distribution samples.
pub fn normality_score(
    image: &Image,
    params: &ModelParams,
    bank: &TransformBank,
    centroids: &Centroids,
) -> Result<f64> {
    if bank.len() != centroids.n_transforms() {
        return Err(Error::ShapeMismatch(format!(
            "bank has {} transforms but centroids cover {}",
            bank.len(),
            centroids.n_transforms()
        )));
    }
    if params.config().feature_dim != centroids.dim() {
        return Err(Error::ShapeMismatch(format!(
            "model features have width {} but centroids have width {}",
            params.config().feature_dim,
            centroids.dim()
        )));
    }
    let mut score = 0.0;
    for (m, transform) in bank.iter().enumerate() {
        let transformed = transform.apply(image)?;
        let feature = params.encode(&transformed)?;
        let probs = transform_probabilities(&feature, centroids);
        score -= math::ln(probs[m]);
    }
    if !score.is_finite() {
        return Err(Error::NonFinite(format!(
            "normality score is {score}"
        )));
    }
    Ok(score)
}

/// Stored training features for kNN scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnIndex {
    features: Tensor,
    k: usize,
}

impl KnnIndex {
    /// Wraps an `[n, d]` feature matrix; `k` must not exceed `n`.
    pub fn new(features: Tensor, k: usize) -> Result<Self> {
        if features.rank() != 2 || features.rows() == 0 || features.cols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "knn index needs a non-empty rank-2 feature matrix, got {:?}",
                features.shape()
            )));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be positive".to_string()));
        }
        if k > features.rows() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds the {} stored features",
                features.rows()
            )));
        }
        Ok(KnnIndex { features, k })
    }

    /// Encodes all transformed copies of the given training rows and stores
    /// them as the reference set.
    pub fn build(
        dataset: &Dataset,
        train_indices: &[usize],
        params: &ModelParams,
        bank: &TransformBank,
        k: usize,
    ) -> Result<Self> {
        if train_indices.is_empty() {
            return Err(Error::InvalidArgument(
                "knn index needs at least one training sample".to_string(),
            ));
        }
        let d = params.config().feature_dim;
        let mut data = Vec::with_capacity(train_indices.len() * bank.len() * d);
        for &si in train_indices {
            let sample = dataset.sample(si);
            for transform in bank.iter() {
                let transformed = transform.apply(&sample.image)?;
                data.extend(params.encode(&transformed)?);
            }
        }
        let features = Tensor::from_vec(
            alloc::vec![train_indices.len() * bank.len(), d],
            data,
        )?;
        KnnIndex::new(features, k)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Mean Euclidean distance to the `k` nearest stored features. The query
    /// is the encoded, untransformed sample.
    pub fn score(&self, feature: &[f64]) -> f64 {
        assert_eq!(
            feature.len(),
            self.features.cols(),
            "feature width mismatch"
        );
        let mut distances: Vec<f64> = (0..self.features.rows())
            .map(|i| math::euclidean_distance(feature, self.features.row(i)))
            .collect();
        distances.sort_unstable_by(f64::total_cmp);
        distances[..self.k].iter().sum::<f64>() / self.k as f64
    }
}

/// A scored test sample, ready for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    /// Index of the sample in its dataset.
    pub sample_id: usize,
    pub normality_score: f64,
    /// 0 = normal, 1 = anomalous.
    pub anomaly_label: u8,
    /// Concept-head probabilities for the untransformed sample.
    pub concept_probs: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use alloc::vec;

    #[test]
    fn equidistant_centroids_give_uniform_probabilities() {
        // Two centroids at +/-1 in 1-D, feature at 0: both distances equal.
        let centroids =
            Centroids::from_matrix(Tensor::from_vec(vec![2, 1], vec![-1.0, 1.0]).unwrap())
                .unwrap();
        let p = transform_probabilities(&[0.0], &centroids);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn transform_probabilities_match_hand_softmax() {
        // Distances^2: 0 to the first centroid, ln 9 to the second:
        // softmax(0, -ln 9) = (0.9, 0.1).
        let offset = (9.0f64).ln().sqrt();
        let centroids =
            Centroids::from_matrix(Tensor::from_vec(vec![2, 1], vec![0.0, offset]).unwrap())
                .unwrap();
        let p = transform_probabilities(&[0.0], &centroids);
        assert!((p[0] - 0.9).abs() < 1e-12);
        assert!((p[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn probabilities_favor_the_nearest_centroid() {
        let centroids = Centroids::from_matrix(
            Tensor::from_vec(vec![3, 2], vec![0.0, 0.0, 5.0, 0.0, 0.0, 5.0]).unwrap(),
        )
        .unwrap();
        let p = transform_probabilities(&[0.2, 0.1], &centroids);
        assert!(p[0] > p[1] && p[0] > p[2]);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn knn_mean_distance_hand_example() {
        // Stored features {0, 10} in 1-D, query 1, k=2: (1 + 9) / 2 = 5.
        let index =
            KnnIndex::new(Tensor::from_vec(vec![2, 1], vec![0.0, 10.0]).unwrap(), 2).unwrap();
        assert_eq!(index.score(&[1.0]), 5.0);
        // k=1 takes only the nearest.
        let index =
            KnnIndex::new(Tensor::from_vec(vec![2, 1], vec![0.0, 10.0]).unwrap(), 1).unwrap();
        assert_eq!(index.score(&[1.0]), 1.0);
    }

    #[test]
    fn knn_construction_validation() {
        let feats = Tensor::from_vec(vec![2, 1], vec![0.0, 1.0]).unwrap();
        assert!(KnnIndex::new(feats.clone(), 0).is_err());
        assert!(KnnIndex::new(feats.clone(), 3).is_err());
        assert!(KnnIndex::new(Tensor::zeros(&[2]), 1).is_err());
        assert!(KnnIndex::new(feats, 2).is_ok());
    }

    #[test]
    fn normality_score_prefers_training_like_inputs() {
        use crate::data::{generate_synthetic, SyntheticSpec};
        use crate::train::final_centroids;

        let ds = generate_synthetic(&SyntheticSpec {
            image_size: 8,
            n_classes: 2,
            n_concepts: 4,
            samples_per_class: 4,
            noise_std: 0.0,
            seed: 2,
        })
        .unwrap();
        let config = ModelConfig {
            input_shape: (8, 8, 1),
            hidden_sizes: vec![],
            feature_dim: 6,
            n_concepts: 4,
        };
        let params = ModelParams::init(&config, 9).unwrap();
        let bank = TransformBank::build(&[0, 1, 2, 3], &[false], &[(0, 0)]).unwrap();
        let normal_rows = ds.class_indices(0);
        let centroids = final_centroids(&ds, &normal_rows, &bank, &params).unwrap();

        // Noise-free data: every class-0 sample sits exactly at its
        // transformation centroid, so its score is minimal.
        let ns_normal =
            normality_score(&ds.sample(normal_rows[0]).image, &params, &bank, &centroids)
                .unwrap();
        let other = ds.class_indices(1)[0];
        let ns_anomalous =
            normality_score(&ds.sample(other).image, &params, &bank, &centroids).unwrap();
        assert!(
            ns_normal < ns_anomalous,
            "normal {ns_normal} vs anomalous {ns_anomalous}"
        );
    }

    #[test]
    fn normality_score_validates_widths() {
        let config = ModelConfig {
            input_shape: (4, 4, 1),
            hidden_sizes: vec![],
            feature_dim: 3,
            n_concepts: 2,
        };
        let params = ModelParams::init(&config, 1).unwrap();
        let bank = TransformBank::build(&[0, 2], &[false], &[(0, 0)]).unwrap();
        let img = Image::zeros(4, 4, 1).unwrap();

        let wrong_m =
            Centroids::from_matrix(Tensor::from_vec(vec![3, 3], vec![0.0; 9]).unwrap()).unwrap();
        assert!(normality_score(&img, &params, &bank, &wrong_m).is_err());

        let wrong_d =
            Centroids::from_matrix(Tensor::from_vec(vec![2, 2], vec![0.0; 4]).unwrap()).unwrap();
        assert!(normality_score(&img, &params, &bank, &wrong_d).is_err());
    }
}
