//! The two training losses and their combination.
//!
//! * Concept loss: per-concept binary cross-entropy between head
//!   probabilities and 0/1 annotations, summed over concepts and averaged
//!   over the batch.
//! * Anomaly-detection loss: a triplet margin loss in feature space that
//!   pulls each transformed sample toward its own transformation's centroid
//!   and away from the nearest other centroid.
//! * Combined: `total = alpha * concept + ad`.
//!
//! These free functions are the straight-line reference used by scoring and
//! by tests; training builds the same quantities on a tape to get gradients.

use alloc::format;
use alloc::string::ToString;

use crate::math;
use crate::tape::BCE_EPSILON;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Binary cross-entropy between predicted probabilities and 0/1 labels.
///
/// Both tensors are `[batch, n_concepts]`; the result is summed over concepts
/// and averaged over the batch. Probabilities are clamped away from 0 and 1
/// so saturated predictions stay finite.
pub fn concept_loss(predicted: &Tensor, labels: &Tensor) -> Result<f64> {
    concept_loss_masked(predicted, labels, None)
}

/// Like [`concept_loss`] but restricted to the concepts flagged `true` in
/// `active` (when given). Used when training with a reduced annotation set.
pub fn concept_loss_masked(
    predicted: &Tensor,
    labels: &Tensor,
    active: Option<&[bool]>,
) -> Result<f64> {
    if predicted.rank() != 2 || labels.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "concept loss expects rank-2 tensors, got {:?} and {:?}",
            predicted.shape(),
            labels.shape()
        )));
    }
    if predicted.shape() != labels.shape() {
        return Err(Error::ShapeMismatch(format!(
            "predicted shape {:?} does not match labels shape {:?}",
            predicted.shape(),
            labels.shape()
        )));
    }
    let (n, k) = (predicted.rows(), predicted.cols());
    if n == 0 {
        return Err(Error::InvalidArgument(
            "concept loss needs at least one row".to_string(),
        ));
    }
    if let Some(mask) = active {
        if mask.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "active mask has {} entries for {k} concepts",
                mask.len()
            )));
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..k {
            if let Some(mask) = active {
                if !mask[j] {
                    continue;
                }
            }
            let c = labels.get2(i, j);
            if c != 0.0 && c != 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "concept label at row {i}, column {j} is {c}, expected 0 or 1"
                )));
            }
            let p_raw = predicted.get2(i, j);
            if !p_raw.is_finite() {
                return Err(Error::NonFinite(format!(
                    "predicted probability at row {i}, column {j} is {p_raw}"
                )));
            }
            // Same floored-argument form as the tape's Bce node, so the two
            // paths agree bit for bit.
            total -= c * math::ln(p_raw.max(BCE_EPSILON))
                + (1.0 - c) * math::ln((1.0 - p_raw).max(BCE_EPSILON));
        }
    }
    Ok(total / n as f64)
}

/// Per-transformation feature centroids: row `m` is the mean feature vector
/// of all rows assigned transformation `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    matrix: Tensor,
}

impl Centroids {
    /// Averages `features` rows grouped by `transform_ids`. Every one of the
    /// `n_transforms` groups must receive at least one row.
    pub fn compute(features: &Tensor, transform_ids: &[usize], n_transforms: usize) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "centroid features must be rank 2, got {:?}",
                features.shape()
            )));
        }
        if transform_ids.len() != features.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} transform ids for {} feature rows",
                transform_ids.len(),
                features.rows()
            )));
        }
        if n_transforms == 0 {
            return Err(Error::InvalidArgument(
                "n_transforms must be positive".to_string(),
            ));
        }
        let d = features.cols();
        let mut sums = alloc::vec![0.0; n_transforms * d];
        let mut counts = alloc::vec![0usize; n_transforms];
        for (i, &m) in transform_ids.iter().enumerate() {
            if m >= n_transforms {
                return Err(Error::InvalidArgument(format!(
                    "transform id {m} out of range for {n_transforms} transformations"
                )));
            }
            counts[m] += 1;
            let row = features.row(i);
            for (acc, &v) in sums[m * d..(m + 1) * d].iter_mut().zip(row) {
                *acc += v;
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidArgument(format!(
                "transformation {empty} has no feature rows to average"
            )));
        }
        for (m, &c) in counts.iter().enumerate() {
            let inv = 1.0 / c as f64;
            for v in &mut sums[m * d..(m + 1) * d] {
                *v *= inv;
            }
        }
        Ok(Centroids {
            matrix: Tensor::from_vec(alloc::vec![n_transforms, d], sums)?,
        })
    }

    /// Wraps an existing `[n_transforms, dim]` matrix (e.g. from a checkpoint).
    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 || matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "centroid matrix must be rank 2 and non-empty, got {:?}",
                matrix.shape()
            )));
        }
        Ok(Centroids { matrix })
    }

    pub fn n_transforms(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, m: usize) -> &[f64] {
        self.matrix.row(m)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

/// Triplet margin loss over transformation centroids.
///
/// For each feature row `i` with transformation id `m_i`:
/// `max(0, |f_i - s_{m_i}|^2 + margin - min_{j != m_i} |f_i - s_j|^2)`,
/// averaged over rows.
pub fn ad_triplet_loss(
    features: &Tensor,
    transform_ids: &[usize],
    centroids: &Centroids,
    margin: f64,
) -> Result<f64> {
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "margin must be non-negative and finite, got {margin}"
        )));
    }
    if features.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "triplet features must be rank 2, got {:?}",
            features.shape()
        )));
    }
    if features.cols() != centroids.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature width {} does not match centroid width {}",
            features.cols(),
            centroids.dim()
        )));
    }
    let m = centroids.n_transforms();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "triplet loss needs at least 2 centroids, got {m}"
        )));
    }
    let n = features.rows();
    if n == 0 || transform_ids.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} transform ids for {n} feature rows",
            transform_ids.len()
        )));
    }
    let mut total = 0.0;
    for (i, &own) in transform_ids.iter().enumerate() {
        if own >= m {
            return Err(Error::InvalidArgument(format!(
                "transform id {own} out of range for {m} centroids"
            )));
        }
        let f = features.row(i);
        let d_own = math::squared_distance(f, centroids.row(own));
        let mut d_other = f64::INFINITY;
        for j in 0..m {
            if j != own {
                let d = math::squared_distance(f, centroids.row(j));
                if d < d_other {
                    d_other = d;
                }
            }
        }
        let hinge = d_own + margin - d_other;
        if hinge > 0.0 {
            total += hinge;
        }
    }
    Ok(total / n as f64)
}

/// The two loss components and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub concept_loss: f64,
    pub ad_loss: f64,
    pub total: f64,
}

/// `total = alpha * concept + ad`; alpha must be non-negative and finite and
/// both components finite.
pub fn combined_loss(concept: f64, ad: f64, alpha: f64) -> Result<LossBreakdown> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be non-negative and finite, got {alpha}"
        )));
    }
    if !concept.is_finite() || !ad.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss components must be finite, got concept {concept}, ad {ad}"
        )));
    }
    Ok(LossBreakdown {
        concept_loss: concept,
        ad_loss: ad,
        total: alpha * concept + ad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use alloc::collections::BTreeMap;
    use alloc::string::String;
    use alloc::vec;

    #[test]
    fn concept_loss_matches_two_ln_two_example() {
        // labels [1, 0], predictions [0.5, 0.5] -> 2 ln 2.
        let p = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let c = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let loss = concept_loss(&p, &c).unwrap();
        assert!((loss - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn concept_loss_near_zero_for_confident_correct_predictions() {
        let p = Tensor::from_vec(vec![2, 2], vec![0.9999, 0.0001, 0.9999, 0.0001]).unwrap();
        let c = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(concept_loss(&p, &c).unwrap() < 1e-3);
        // And finite even when fully saturated.
        let p = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let c = Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert!(concept_loss(&p, &c).unwrap().is_finite());
    }

    #[test]
    fn concept_loss_averages_over_rows() {
        let p1 = Tensor::from_vec(vec![1, 1], vec![0.3]).unwrap();
        let c1 = Tensor::from_vec(vec![1, 1], vec![1.0]).unwrap();
        let single = concept_loss(&p1, &c1).unwrap();
        let p2 = Tensor::from_vec(vec![2, 1], vec![0.3, 0.3]).unwrap();
        let c2 = Tensor::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let doubled = concept_loss(&p2, &c2).unwrap();
        assert!((single - doubled).abs() < 1e-12);
    }

    #[test]
    fn concept_loss_rejects_bad_labels_and_shapes() {
        let p = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let half = Tensor::from_vec(vec![1, 2], vec![0.5, 1.0]).unwrap();
        assert!(matches!(
            concept_loss(&p, &half),
            Err(Error::InvalidArgument(_))
        ));
        let wrong = Tensor::from_vec(vec![1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            concept_loss(&p, &wrong),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn masked_concept_loss_ignores_inactive_columns() {
        let p = Tensor::from_vec(vec![1, 3], vec![0.5, 0.9, 0.1]).unwrap();
        let c = Tensor::from_vec(vec![1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        let only_first = concept_loss_masked(&p, &c, Some(&[true, false, false])).unwrap();
        assert!((only_first - -(0.5f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn direct_concept_loss_agrees_with_tape_bce() {
        let p = Tensor::from_vec(vec![3, 2], vec![0.2, 0.7, 0.55, 0.9, 0.05, 0.5]).unwrap();
        let c = Tensor::from_vec(vec![3, 2], vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let direct = concept_loss(&p, &c).unwrap();

        let mut tape = Tape::new();
        let pn = tape.input("p", &[3, 2]).unwrap();
        let cn = tape.constant(c.clone());
        let loss = tape.bce(pn, cn, None).unwrap();
        let bindings: BTreeMap<String, Tensor> = [("p".into(), p)].into_iter().collect();
        let via_tape = tape
            .evaluate(&bindings)
            .unwrap()
            .value(loss)
            .scalar_value()
            .unwrap();
        assert!((direct - via_tape).abs() < 1e-12);
    }

    #[test]
    fn centroid_of_two_rows_is_their_mean() {
        let f = Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 2.0, 4.0]).unwrap();
        let c = Centroids::compute(&f, &[0, 0], 1).unwrap();
        assert_eq!(c.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn centroid_compute_rejects_empty_groups_and_bad_ids() {
        let f = Tensor::from_vec(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(Centroids::compute(&f, &[0, 0], 2).is_err());
        assert!(Centroids::compute(&f, &[0, 5], 2).is_err());
        assert!(Centroids::compute(&f, &[0], 1).is_err());
    }

    #[test]
    fn triplet_loss_matches_one_dimensional_hand_values() {
        let centroids =
            Centroids::from_matrix(Tensor::from_vec(vec![2, 1], vec![0.0, 10.0]).unwrap()).unwrap();
        // f = 2, own centroid 0: 4 + 1 - 64 < 0 -> loss 0.
        let f = Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap();
        assert_eq!(ad_triplet_loss(&f, &[0], &centroids, 1.0).unwrap(), 0.0);
        // f = 6: 36 + 1 - 16 = 21.
        let f = Tensor::from_vec(vec![1, 1], vec![6.0]).unwrap();
        assert_eq!(ad_triplet_loss(&f, &[0], &centroids, 1.0).unwrap(), 21.0);
        // Averaging over both rows: (0 + 21) / 2.
        let f = Tensor::from_vec(vec![2, 1], vec![2.0, 6.0]).unwrap();
        assert_eq!(ad_triplet_loss(&f, &[0, 0], &centroids, 1.0).unwrap(), 10.5);
    }

    #[test]
    fn triplet_loss_zero_when_well_separated() {
        let centroids = Centroids::from_matrix(
            Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 100.0, 100.0]).unwrap(),
        )
        .unwrap();
        let f = Tensor::from_vec(vec![2, 2], vec![0.1, -0.1, 99.9, 100.2]).unwrap();
        assert_eq!(ad_triplet_loss(&f, &[0, 1], &centroids, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn triplet_loss_validations() {
        let centroids =
            Centroids::from_matrix(Tensor::from_vec(vec![2, 1], vec![0.0, 1.0]).unwrap()).unwrap();
        let f = Tensor::from_vec(vec![1, 1], vec![0.0]).unwrap();
        assert!(ad_triplet_loss(&f, &[0], &centroids, -1.0).is_err());
        assert!(ad_triplet_loss(&f, &[2], &centroids, 1.0).is_err());
        assert!(ad_triplet_loss(&f, &[0, 1], &centroids, 1.0).is_err());
        let single =
            Centroids::from_matrix(Tensor::from_vec(vec![1, 1], vec![0.0]).unwrap()).unwrap();
        assert!(ad_triplet_loss(&f, &[0], &single, 1.0).is_err());
        let wide = Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(ad_triplet_loss(&wide, &[0], &centroids, 1.0).is_err());
    }

    #[test]
    fn combined_loss_is_linear_in_alpha() {
        let a = combined_loss(2.0, 3.0, 0.0).unwrap();
        assert_eq!(a.total, 3.0);
        let b = combined_loss(2.0, 3.0, 0.5).unwrap();
        assert_eq!(b.total, 4.0);
        let c = combined_loss(2.0, 3.0, 10.0).unwrap();
        assert_eq!(c.total, 23.0);
        assert!(combined_loss(2.0, 3.0, -0.1).is_err());
        assert!(combined_loss(f64::NAN, 3.0, 1.0).is_err());
    }
}
