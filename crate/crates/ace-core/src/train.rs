//! The joint training loop.
//!
//! Each step builds a fresh tape over one shuffled mini-batch: every sample
//! is expanded into all `M` transformed copies, the shared encoder maps them
//! to features, and two heads of the graph compute the concept
//! cross-entropy (on each copy, against the sample's annotations) and the
//! triplet loss against batch centroids. Gradients of
//! `total = alpha * concept + ad` flow through everything, including the
//! centroids themselves, and a plain SGD step updates the parameters.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::model::{ModelConfig, ModelParams};
use crate::objective::Centroids;
use crate::optim::sgd_step;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::transforms::TransformBank;
use crate::{Error, Result};

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    /// Weight of the concept loss in the combined objective.
    pub alpha: f64,
    /// Triplet margin.
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds parameter initialization and epoch shuffling.
    pub seed: u64,
    /// Optional per-concept mask; `false` entries are excluded from the
    /// concept loss (sparse-annotation training). `None` trains on all.
    pub active_concepts: Option<Vec<bool>>,
}

/// One logged loss evaluation (pre-update, per batch).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub concept_loss: f64,
    pub ad_loss: f64,
    pub total: f64,
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Final per-transformation centroids over the whole training set.
    pub centroids: Centroids,
    pub history: Vec<LossRecord>,
}

/// Trains on the given dataset rows (typically the normal-class train split).
///
/// With `epochs == 0` the initial parameters are returned untouched, with
/// centroids computed from them. If the total loss ever leaves the finite
/// range the run aborts with [`Error::Diverged`], reporting the offending
/// epoch/batch and the last finite total.
pub fn train(
    dataset: &Dataset,
    train_indices: &[usize],
    bank: &TransformBank,
    model_config: &ModelConfig,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    validate(dataset, train_indices, bank, model_config, settings)?;
    let m = bank.len();
    let input_dim = model_config.input_dim();
    let n_concepts = model_config.n_concepts;

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut params = ModelParams::init_from_rng(model_config, &mut rng)?;
    let mut history = Vec::new();
    let mut order: Vec<usize> = train_indices.to_vec();

    for epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        for (batch, chunk) in order.chunks(settings.batch_size).enumerate() {
            let rows = chunk.len() * m;
            let mut xdata = Vec::with_capacity(rows * input_dim);
            let mut labels = Vec::with_capacity(rows * n_concepts);
            let mut ids = Vec::with_capacity(rows);
            for &si in chunk {
                let sample = dataset.sample(si);
                for (tid, transform) in bank.iter().enumerate() {
                    let transformed = transform.apply(&sample.image)?;
                    xdata.extend_from_slice(transformed.pixels());
                    labels.extend(sample.concepts.iter().map(|&b| b as f64));
                    ids.push(tid);
                }
            }

            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_vec(alloc::vec![rows, input_dim], xdata)?);
            let features = model_config.encoder_graph(&mut tape, x)?;
            let probs = model_config.head_graph(&mut tape, features)?;
            let label_node =
                tape.constant(Tensor::from_vec(alloc::vec![rows, n_concepts], labels)?);
            let concept = tape.bce(probs, label_node, settings.active_concepts.clone())?;

            let centroids = tape.group_mean_rows(features, ids.clone(), m)?;
            let dists = tape.sq_dist_rows(features, centroids)?;
            let own = tape.select_cols(dists, ids.clone())?;
            let nearest_other = tape.min_excluding_cols(dists, ids)?;
            let gap = tape.sub(own, nearest_other)?;
            let shifted = tape.offset(gap, settings.margin);
            let hinged = tape.relu(shifted);
            let ad = tape.mean(hinged)?;

            let weighted_concept = tape.scale(concept, settings.alpha);
            let total = tape.add(weighted_concept, ad)?;

            let (eval, grads) = tape.evaluate_with_gradient(params.tensors(), total)?;
            let concept_loss = eval.value(concept).scalar_value()?;
            let ad_loss = eval.value(ad).scalar_value()?;
            let total_loss = eval.value(total).scalar_value()?;
            if !total_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    last_total: history.last().map(|r: &LossRecord| r.total).unwrap_or(0.0),
                });
            }
            history.push(LossRecord {
                epoch,
                batch,
                concept_loss,
                ad_loss,
                total: total_loss,
            });
            sgd_step(params.tensors_mut(), &grads, settings.learning_rate)?;
            if !params.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    last_total: total_loss,
                });
            }
        }
    }

    let centroids = final_centroids(dataset, train_indices, bank, &params)?;
    Ok(TrainOutcome {
        params,
        centroids,
        history,
    })
}

/// Per-transformation centroids of the training set under given parameters.
pub fn final_centroids(
    dataset: &Dataset,
    train_indices: &[usize],
    bank: &TransformBank,
    params: &ModelParams,
) -> Result<Centroids> {
    let m = bank.len();
    let d = params.config().feature_dim;
    let n = train_indices.len();
    let mut features = Vec::with_capacity(n * m * d);
    let mut ids = Vec::with_capacity(n * m);
    for &si in train_indices {
        let sample = dataset.sample(si);
        for (tid, transform) in bank.iter().enumerate() {
            let transformed = transform.apply(&sample.image)?;
            features.extend(params.encode(&transformed)?);
            ids.push(tid);
        }
    }
    let features = Tensor::from_vec(alloc::vec![n * m, d], features)?;
    Centroids::compute(&features, &ids, m)
}

fn validate(
    dataset: &Dataset,
    train_indices: &[usize],
    bank: &TransformBank,
    model_config: &ModelConfig,
    settings: &TrainSettings,
) -> Result<()> {
    model_config.validate()?;
    if train_indices.is_empty() {
        return Err(Error::InvalidArgument(
            "training index list is empty".to_string(),
        ));
    }
    if let Some(&bad) = train_indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::InvalidArgument(format!(
            "training index {bad} out of range for {} samples",
            dataset.len()
        )));
    }
    if dataset.dims() != model_config.input_shape {
        return Err(Error::ShapeMismatch(format!(
            "dataset images are {:?} but the model expects {:?}",
            dataset.dims(),
            model_config.input_shape
        )));
    }
    if dataset.n_concepts() != model_config.n_concepts {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} concepts but the model predicts {}",
            dataset.n_concepts(),
            model_config.n_concepts
        )));
    }
    if settings.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".to_string()));
    }
    if !(settings.alpha.is_finite() && settings.alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be non-negative and finite, got {}",
            settings.alpha
        )));
    }
    if !(settings.margin.is_finite() && settings.margin >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "margin must be non-negative and finite, got {}",
            settings.margin
        )));
    }
    if !(settings.learning_rate.is_finite() && settings.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive and finite, got {}",
            settings.learning_rate
        )));
    }
    if let Some(mask) = &settings.active_concepts {
        if mask.len() != model_config.n_concepts {
            return Err(Error::ShapeMismatch(format!(
                "active concept mask has {} entries for {} concepts",
                mask.len(),
                model_config.n_concepts
            )));
        }
        if !mask.contains(&true) {
            return Err(Error::InvalidArgument(
                "active concept mask disables every concept".to_string(),
            ));
        }
    }
    // Bank construction already guarantees M >= 2 with the identity first,
    // which the triplet loss relies on.
    debug_assert!(bank.len() >= 2);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, one_vs_all_split, SyntheticSpec};
    use crate::objective::{ad_triplet_loss, concept_loss_masked};
    use alloc::vec;

    fn tiny_dataset() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            image_size: 8,
            n_classes: 2,
            n_concepts: 4,
            samples_per_class: 6,
            noise_std: 0.05,
            seed: 21,
        })
        .unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            input_shape: (8, 8, 1),
            hidden_sizes: vec![10],
            feature_dim: 4,
            n_concepts: 4,
        }
    }

    fn tiny_settings() -> TrainSettings {
        TrainSettings {
            alpha: 0.1,
            margin: 1.0,
            learning_rate: 0.01,
            batch_size: 2,
            epochs: 2,
            seed: 5,
            active_concepts: None,
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params_with_centroids() {
        let ds = tiny_dataset();
        let split = one_vs_all_split(&ds, 0, 0.8, 1).unwrap();
        let bank = TransformBank::build(&[0, 2], &[false], &[(0, 0)]).unwrap();
        let mut settings = tiny_settings();
        settings.epochs = 0;
        let out = train(&ds, &split.train, &bank, &tiny_model(), &settings).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.centroids.n_transforms(), 2);
        // The parameters are exactly the seeded initialization.
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let fresh = ModelParams::init_from_rng(&tiny_model(), &mut rng).unwrap();
        assert_eq!(out.params, fresh);
    }

    #[test]
    fn history_covers_every_batch_and_is_deterministic() {
        let ds = tiny_dataset();
        let split = one_vs_all_split(&ds, 0, 0.8, 1).unwrap();
        let bank = TransformBank::build(&[0, 1, 2, 3], &[false], &[(0, 0)]).unwrap();
        let settings = tiny_settings();
        let a = train(&ds, &split.train, &bank, &tiny_model(), &settings).unwrap();
        // 4 train samples (floor(0.8 * 6) = 4), batch 2 -> 2 batches/epoch.
        assert_eq!(a.history.len(), 4);
        assert_eq!((a.history[0].epoch, a.history[0].batch), (0, 0));
        assert_eq!((a.history[3].epoch, a.history[3].batch), (1, 1));
        for r in &a.history {
            assert!(r.total.is_finite());
            assert!((r.total - (settings.alpha * r.concept_loss + r.ad_loss)).abs() < 1e-12);
        }
        let b = train(&ds, &split.train, &bank, &tiny_model(), &settings).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn logged_losses_match_reference_implementations() {
        // Recompute the first batch's losses with the straight-line objective
        // code: initial params, first epoch's shuffled order.
        let ds = tiny_dataset();
        let split = one_vs_all_split(&ds, 0, 0.8, 1).unwrap();
        let bank = TransformBank::build(&[0, 2], &[false], &[(0, 0)]).unwrap();
        let mut settings = tiny_settings();
        settings.epochs = 1;
        settings.batch_size = split.train.len(); // single batch
        let out = train(&ds, &split.train, &bank, &tiny_model(), &settings).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let params = ModelParams::init_from_rng(&tiny_model(), &mut rng).unwrap();
        let mut order = split.train.clone();
        order.shuffle(&mut rng);

        let m = bank.len();
        let mut feats = Vec::new();
        let mut ids = Vec::new();
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for &si in &order {
            let sample = ds.sample(si);
            for (tid, t) in bank.iter().enumerate() {
                let f = params.encode(&t.apply(&sample.image).unwrap()).unwrap();
                probs.extend(params.predict_concepts(&f).unwrap());
                feats.extend(f);
                ids.push(tid);
                labels.extend(sample.concepts.iter().map(|&b| b as f64));
            }
        }
        let rows = ids.len();
        let feats = Tensor::from_vec(vec![rows, 4], feats).unwrap();
        let probs = Tensor::from_vec(vec![rows, 4], probs).unwrap();
        let labels = Tensor::from_vec(vec![rows, 4], labels).unwrap();
        let centroids = Centroids::compute(&feats, &ids, m).unwrap();
        let expect_con = concept_loss_masked(&probs, &labels, None).unwrap();
        let expect_ad = ad_triplet_loss(&feats, &ids, &centroids, settings.margin).unwrap();

        assert!((out.history[0].concept_loss - expect_con).abs() < 1e-9);
        assert!((out.history[0].ad_loss - expect_ad).abs() < 1e-9);
    }

    #[test]
    fn divergence_is_reported_with_location() {
        let ds = tiny_dataset();
        let split = one_vs_all_split(&ds, 0, 0.8, 1).unwrap();
        let bank = TransformBank::build(&[0, 2], &[false], &[(0, 0)]).unwrap();
        let mut settings = tiny_settings();
        settings.learning_rate = 1e200;
        settings.epochs = 50;
        let err = train(&ds, &split.train, &bank, &tiny_model(), &settings).unwrap_err();
        match err {
            Error::Diverged { last_total, .. } => assert!(last_total.is_finite()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn validation_rejects_mismatched_inputs() {
        let ds = tiny_dataset();
        let split = one_vs_all_split(&ds, 0, 0.8, 1).unwrap();
        let bank = TransformBank::build(&[0, 2], &[false], &[(0, 0)]).unwrap();

        let err = train(&ds, &[], &bank, &tiny_model(), &tiny_settings()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));

        let mut wrong_model = tiny_model();
        wrong_model.n_concepts = 3;
        assert!(train(&ds, &split.train, &bank, &wrong_model, &tiny_settings()).is_err());

        let mut wrong_shape = tiny_model();
        wrong_shape.input_shape = (4, 4, 1);
        assert!(train(&ds, &split.train, &bank, &wrong_shape, &tiny_settings()).is_err());

        let mut bad_mask = tiny_settings();
        bad_mask.active_concepts = Some(vec![true; 3]);
        assert!(train(&ds, &split.train, &bank, &tiny_model(), &bad_mask).is_err());

        let mut all_off = tiny_settings();
        all_off.active_concepts = Some(vec![false; 4]);
        assert!(train(&ds, &split.train, &bank, &tiny_model(), &all_off).is_err());
    }

    #[test]
    fn training_reduces_the_ad_loss() {
        let ds = tiny_dataset();
        let split = one_vs_all_split(&ds, 0, 0.8, 1).unwrap();
        let bank = TransformBank::build(&[0, 1, 2, 3], &[false], &[(0, 0)]).unwrap();
        let mut settings = tiny_settings();
        settings.epochs = 12;
        settings.alpha = 0.0;
        let out = train(&ds, &split.train, &bank, &tiny_model(), &settings).unwrap();
        let first = out.history.first().unwrap().ad_loss;
        let last = out.history.last().unwrap().ad_loss;
        assert!(
            last < first,
            "ad loss did not decrease: first {first}, last {last}"
        );
    }
}
