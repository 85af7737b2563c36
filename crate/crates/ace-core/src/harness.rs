//! Experiment orchestration: configuration, one-vs-all runs, aggregation,
//! and the two sweeps (concept fraction and alpha).

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::{SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{one_vs_all_split, Dataset};
use crate::metrics::{concept_accuracy, roc_auc};
use crate::model::{ModelConfig, ModelParams};
use crate::objective::Centroids;
use crate::scoring::{normality_score, KnnIndex, ScoredSample};
use crate::train::{train, LossRecord, TrainSettings};
use crate::transforms::TransformBank;
use crate::{Error, Result};

/// Salt mixed into the cell seed when drawing the sparse-concept subset, so
/// the subset is independent of the parameter-initialization stream.
const CONCEPT_MASK_SALT: u64 = 0x636f_6e63_6570_74;

/// Which normality score to use at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Softmax over centroid distances, summed over the transform bank.
    CentroidSoftmax,
    /// Mean distance to the k nearest stored training features.
    Knn,
}

/// Which classes to run as the normal class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClassSelection {
    All,
    List(Vec<usize>),
}

impl ClassSelection {
    pub fn resolve(&self, n_classes: usize) -> Result<Vec<usize>> {
        match self {
            ClassSelection::All => Ok((0..n_classes).collect()),
            ClassSelection::List(list) => {
                if list.is_empty() {
                    return Err(Error::InvalidArgument(
                        "k_ind list must not be empty".to_string(),
                    ));
                }
                let mut seen = BTreeSet::new();
                for &k in list {
                    if k >= n_classes {
                        return Err(Error::InvalidArgument(format!(
                            "k_ind {k} out of range for {n_classes} classes"
                        )));
                    }
                    if !seen.insert(k) {
                        return Err(Error::InvalidArgument(format!(
                            "k_ind {k} listed twice"
                        )));
                    }
                }
                Ok(list.clone())
            }
        }
    }
}

impl Serialize for ClassSelection {
    fn serialize<S: Serializer>(&self, serializer: S) -> core::result::Result<S::Ok, S::Error> {
        match self {
            ClassSelection::All => serializer.serialize_str("all"),
            ClassSelection::List(list) => list.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for ClassSelection {
    fn deserialize<D: Deserializer<'de>>(
        deserializer: D,
    ) -> core::result::Result<Self, D::Error> {
        struct SelectionVisitor;

        impl<'de> Visitor<'de> for SelectionVisitor {
            type Value = ClassSelection;

            fn expecting(&self, f: &mut core::fmt::Formatter) -> core::fmt::Result {
                f.write_str("\"all\" or a list of class indices")
            }

            fn visit_str<E: serde::de::Error>(
                self,
                v: &str,
            ) -> core::result::Result<Self::Value, E> {
                if v == "all" {
                    Ok(ClassSelection::All)
                } else {
                    Err(E::custom(format!(
                        "expected \"all\" or a list of class indices, got {v:?}"
                    )))
                }
            }

            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> core::result::Result<Self::Value, A::Error> {
                let mut list = Vec::new();
                while let Some(k) = seq.next_element::<usize>()? {
                    list.push(k);
                }
                Ok(ClassSelection::List(list))
            }
        }

        deserializer.deserialize_any(SelectionVisitor)
    }
}

/// Everything needed to reproduce an experiment, minus the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub backbone: Backbone,
    /// Concept-loss weight in the combined objective.
    pub alpha: f64,
    /// Triplet margin.
    pub margin_d: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Rotation factor set (quarter turns).
    pub rotations: Vec<u8>,
    /// Flip factor set.
    pub flips: Vec<bool>,
    /// Circular-shift magnitude for the 3x3 shift grid; `None` derives
    /// `ceil(width / 8)` from the dataset.
    pub shift_magnitude: Option<u32>,
    /// Explicit shift set, overriding the grid when present.
    pub shifts: Option<Vec<(i32, i32)>>,
    pub hidden_sizes: Vec<usize>,
    pub feature_dim: usize,
    pub train_fraction: f64,
    /// Fraction of concept annotations used in training, in (0, 1].
    pub concept_fraction: f64,
    pub seeds: Vec<u64>,
    pub k_ind: ClassSelection,
    /// Neighbor count for the knn backbone.
    pub knn_k: usize,
}

impl Default for ExperimentConfig {
    /// The centroid-softmax defaults: alpha 0.01, margin 1, SGD with
    /// learning rate 0.01 and batch size 4 over 15 epochs, the full
    /// 72-transform bank, and seeds 1..=5.
    fn default() -> Self {
        ExperimentConfig {
            backbone: Backbone::CentroidSoftmax,
            alpha: 0.01,
            margin_d: 1.0,
            learning_rate: 0.01,
            batch_size: 4,
            epochs: 15,
            rotations: alloc::vec![0, 1, 2, 3],
            flips: alloc::vec![false, true],
            shift_magnitude: None,
            shifts: None,
            hidden_sizes: alloc::vec![32],
            feature_dim: 24,
            train_fraction: 0.8,
            concept_fraction: 1.0,
            seeds: alloc::vec![1, 2, 3, 4, 5],
            k_ind: ClassSelection::All,
            knn_k: 2,
        }
    }
}

impl ExperimentConfig {
    /// The knn-backbone preset: two transforms (identity and 180 degrees),
    /// learning rate 1e-3, alpha 0.1, 20 epochs, k=2.
    pub fn knn_defaults() -> Self {
        ExperimentConfig {
            backbone: Backbone::Knn,
            alpha: 0.1,
            learning_rate: 1e-3,
            epochs: 20,
            rotations: alloc::vec![0, 2],
            flips: alloc::vec![false],
            shift_magnitude: Some(0),
            ..ExperimentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be non-negative and finite, got {}",
                self.alpha
            )));
        }
        if !(self.margin_d.is_finite() && self.margin_d >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "margin_d must be non-negative and finite, got {}",
                self.margin_d
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch_size must be positive".to_string(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.concept_fraction > 0.0 && self.concept_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "concept_fraction must be in (0, 1], got {}",
                self.concept_fraction
            )));
        }
        if self.feature_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "feature_dim must be at least 2, got {}",
                self.feature_dim
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("seeds list is empty".to_string()));
        }
        let mut seen = BTreeSet::new();
        for &s in &self.seeds {
            if !seen.insert(s) {
                return Err(Error::InvalidArgument(format!("seed {s} listed twice")));
            }
        }
        if self.knn_k == 0 {
            return Err(Error::InvalidArgument("knn_k must be positive".to_string()));
        }
        Ok(())
    }

    /// Builds the transform bank for images of the given width.
    pub fn bank_for(&self, image_width: usize) -> Result<TransformBank> {
        let shifts = match &self.shifts {
            Some(list) => list.clone(),
            None => {
                let magnitude = self
                    .shift_magnitude
                    .unwrap_or_else(|| (image_width as u32).div_ceil(8));
                TransformBank::shift_grid(magnitude)
            }
        };
        TransformBank::build(&self.rotations, &self.flips, &shifts)
    }

    /// The model architecture this config induces on a dataset.
    pub fn model_config_for(&self, dataset: &Dataset) -> ModelConfig {
        ModelConfig {
            input_shape: dataset.dims(),
            hidden_sizes: self.hidden_sizes.clone(),
            feature_dim: self.feature_dim,
            n_concepts: dataset.n_concepts(),
        }
    }

    /// Seeded sparse-concept mask: `ceil(concept_fraction * n_concepts)`
    /// concepts drawn without replacement. `None` when training on all.
    pub fn concept_mask(&self, n_concepts: usize, seed: u64) -> Option<Vec<bool>> {
        if self.concept_fraction >= 1.0 {
            return None;
        }
        let n_selected = (crate::math::ceil(self.concept_fraction * n_concepts as f64)
            as usize)
            .clamp(1, n_concepts);
        let mut order: Vec<usize> = (0..n_concepts).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CONCEPT_MASK_SALT);
        order.shuffle(&mut rng);
        let mut mask = alloc::vec![false; n_concepts];
        for &c in &order[..n_selected] {
            mask[c] = true;
        }
        Some(mask)
    }
}

/// Everything one `(k_ind, seed)` cell produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub k_ind: usize,
    pub seed: u64,
    pub auc: f64,
    /// Concept accuracy over the normal-class test samples. One-vs-all
    /// training sees a single class's annotations, so the head cannot anchor
    /// concept predictions for other classes; restricting the metric to
    /// in-distribution samples measures explanation quality rather than the
    /// codeword overlap between classes.
    pub concept_acc: f64,
    pub scored: Vec<ScoredSample>,
    pub history: Vec<LossRecord>,
    pub params: ModelParams,
    pub centroids: Centroids,
    /// Present only for the knn backbone.
    pub knn: Option<KnnIndex>,
}

/// Runs a single cell: split, train on the normal class, score every test
/// sample with the configured backbone, and compute the two metrics.
pub fn run_experiment(
    config: &ExperimentConfig,
    dataset: &Dataset,
    k_ind: usize,
    seed: u64,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    let (_, width, _) = dataset.dims();
    let bank = config.bank_for(width)?;
    let model_config = config.model_config_for(dataset);
    let split = one_vs_all_split(dataset, k_ind, config.train_fraction, seed)?;
    let settings = TrainSettings {
        alpha: config.alpha,
        margin: config.margin_d,
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        epochs: config.epochs,
        seed,
        active_concepts: config.concept_mask(dataset.n_concepts(), seed),
    };
    let outcome = train(dataset, &split.train, &bank, &model_config, &settings)?;
    let knn = match config.backbone {
        Backbone::Knn => Some(KnnIndex::build(
            dataset,
            &split.train,
            &outcome.params,
            &bank,
            config.knn_k,
        )?),
        Backbone::CentroidSoftmax => None,
    };

    let mut scored = Vec::with_capacity(split.test.len());
    for (&si, &label) in split.test.iter().zip(&split.test_labels) {
        let sample = dataset.sample(si);
        let feature = outcome.params.encode(&sample.image)?;
        let ns = match &knn {
            Some(index) => index.score(&feature),
            None => normality_score(&sample.image, &outcome.params, &bank, &outcome.centroids)?,
        };
        scored.push(ScoredSample {
            sample_id: si,
            normality_score: ns,
            anomaly_label: label,
            concept_probs: outcome.params.predict_concepts(&feature)?,
        });
    }

    let scores: Vec<f64> = scored.iter().map(|s| s.normality_score).collect();
    let auc = roc_auc(&scores, &split.test_labels)?;

    let mut normal_probs = Vec::new();
    let mut normal_labels = Vec::new();
    for s in scored.iter().filter(|s| s.anomaly_label == 0) {
        normal_probs.push(s.concept_probs.clone());
        normal_labels.push(dataset.sample(s.sample_id).concepts.clone());
    }
    let concept_acc = concept_accuracy(&normal_probs, &normal_labels)?;

    Ok(ExperimentOutcome {
        k_ind,
        seed,
        auc,
        concept_acc,
        scored,
        history: outcome.history,
        params: outcome.params,
        centroids: outcome.centroids,
        knn,
    })
}

/// One row of the report's cell table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub k_ind: usize,
    pub seed: u64,
    pub auc: f64,
    pub concept_acc: f64,
}

/// Per-class aggregate over seeds. Standard deviations are sample standard
/// deviations and reported only when a class has at least two cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub k_ind: usize,
    pub cells: usize,
    pub auc_mean: f64,
    pub auc_std: Option<f64>,
    pub concept_acc_mean: f64,
    pub concept_acc_std: Option<f64>,
}

/// Grand averages: arithmetic means of the per-class means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageSummary {
    pub auc: f64,
    pub concept_acc: f64,
}

/// The machine-readable result of a one-vs-all run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub cells: Vec<CellSummary>,
    pub per_class: Vec<ClassSummary>,
    pub average: AverageSummary,
}

impl RunReport {
    /// Deterministically aggregates cell results: classes appear in first-seen
    /// order, per-class means are over that class's cells, and the grand
    /// average is the mean of the per-class means.
    pub fn aggregate(config: ExperimentConfig, cells: Vec<CellSummary>) -> Result<RunReport> {
        if cells.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot aggregate an empty cell list".to_string(),
            ));
        }
        let mut class_order: Vec<usize> = Vec::new();
        for cell in &cells {
            if !class_order.contains(&cell.k_ind) {
                class_order.push(cell.k_ind);
            }
        }
        let mut per_class = Vec::with_capacity(class_order.len());
        for &k in &class_order {
            let aucs: Vec<f64> = cells
                .iter()
                .filter(|c| c.k_ind == k)
                .map(|c| c.auc)
                .collect();
            let accs: Vec<f64> = cells
                .iter()
                .filter(|c| c.k_ind == k)
                .map(|c| c.concept_acc)
                .collect();
            per_class.push(ClassSummary {
                k_ind: k,
                cells: aucs.len(),
                auc_mean: mean(&aucs),
                auc_std: sample_std(&aucs),
                concept_acc_mean: mean(&accs),
                concept_acc_std: sample_std(&accs),
            });
        }
        let average = AverageSummary {
            auc: mean(&per_class.iter().map(|c| c.auc_mean).collect::<Vec<_>>()),
            concept_acc: mean(
                &per_class
                    .iter()
                    .map(|c| c.concept_acc_mean)
                    .collect::<Vec<_>>(),
            ),
        };
        Ok(RunReport {
            config,
            cells,
            per_class,
            average,
        })
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    Some(crate::math::sqrt(var))
}

/// A cell that failed, with the error message it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub k_ind: usize,
    pub seed: u64,
    pub message: String,
}

/// Loss history of one successful cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellHistory {
    pub k_ind: usize,
    pub seed: u64,
    pub records: Vec<LossRecord>,
}

/// Aggregated one-vs-all result plus per-cell artifacts.
#[derive(Debug, Clone)]
pub struct OneVsAllOutcome {
    pub report: RunReport,
    pub histories: Vec<CellHistory>,
    pub failures: Vec<CellFailure>,
}

/// The `(k_ind, seed)` grid in execution order: classes outermost, seeds
/// innermost.
pub fn experiment_cells(
    config: &ExperimentConfig,
    dataset: &Dataset,
) -> Result<Vec<(usize, u64)>> {
    config.validate()?;
    let classes = config.k_ind.resolve(dataset.n_classes())?;
    let mut cells = Vec::with_capacity(classes.len() * config.seeds.len());
    for &k in &classes {
        for &seed in &config.seeds {
            cells.push((k, seed));
        }
    }
    Ok(cells)
}

/// Runs every cell serially and aggregates. Individual cell failures are
/// recorded and skipped; only a fully failed grid is an error.
pub fn run_one_vs_all(config: &ExperimentConfig, dataset: &Dataset) -> Result<OneVsAllOutcome> {
    let cells = experiment_cells(config, dataset)?;
    let mut summaries = Vec::new();
    let mut histories = Vec::new();
    let mut failures = Vec::new();
    for (k_ind, seed) in cells {
        match run_experiment(config, dataset, k_ind, seed) {
            Ok(outcome) => {
                summaries.push(CellSummary {
                    k_ind,
                    seed,
                    auc: outcome.auc,
                    concept_acc: outcome.concept_acc,
                });
                histories.push(CellHistory {
                    k_ind,
                    seed,
                    records: outcome.history,
                });
            }
            Err(err) => failures.push(CellFailure {
                k_ind,
                seed,
                message: err.to_string(),
            }),
        }
    }
    if summaries.is_empty() {
        let first = failures.first().expect("at least one cell");
        return Err(Error::InvalidArgument(format!(
            "all {} cells failed; first failure (k_ind {}, seed {}): {}",
            failures.len(),
            first.k_ind,
            first.seed,
            first.message
        )));
    }
    let report = RunReport::aggregate(config.clone(), summaries)?;
    Ok(OneVsAllOutcome {
        report,
        histories,
        failures,
    })
}

/// One sweep entry: the swept value and the full one-vs-all outcome run with
/// it.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub outcome: OneVsAllOutcome,
}

/// Reruns the full one-vs-all grid once per concept fraction. Every point
/// shares the config's seeds, so cells are comparable across fractions.
pub fn sweep_concept_fraction(
    config: &ExperimentConfig,
    dataset: &Dataset,
    fractions: &[f64],
) -> Result<Vec<SweepPoint>> {
    if fractions.is_empty() {
        return Err(Error::InvalidArgument(
            "fraction list must not be empty".to_string(),
        ));
    }
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "concept fraction must be in (0, 1], got {f}"
            )));
        }
    }
    let mut points = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let mut cfg = config.clone();
        cfg.concept_fraction = f;
        points.push(SweepPoint {
            value: f,
            outcome: run_one_vs_all(&cfg, dataset)?,
        });
    }
    Ok(points)
}

/// Reruns the full one-vs-all grid once per alpha value.
pub fn sweep_alpha(
    config: &ExperimentConfig,
    dataset: &Dataset,
    alphas: &[f64],
) -> Result<Vec<SweepPoint>> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument(
            "alpha list must not be empty".to_string(),
        ));
    }
    for &a in alphas {
        if !(a.is_finite() && a >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be non-negative and finite, got {a}"
            )));
        }
    }
    let mut points = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let mut cfg = config.clone();
        cfg.alpha = a;
        points.push(SweepPoint {
            value: a,
            outcome: run_one_vs_all(&cfg, dataset)?,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use alloc::vec;

    fn tiny_dataset(n_classes: usize) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            image_size: 8,
            n_classes,
            n_concepts: 4,
            samples_per_class: 10,
            noise_std: 0.05,
            seed: 17,
        })
        .unwrap()
    }

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            epochs: 1,
            batch_size: 4,
            rotations: vec![0, 2],
            flips: vec![false],
            shift_magnitude: Some(0),
            hidden_sizes: vec![8],
            feature_dim: 4,
            seeds: vec![1, 2],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = ExperimentConfig::default();
        assert_eq!(c.alpha, 0.01);
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.epochs, 15);
        assert_eq!(c.train_fraction, 0.8);
        assert_eq!(c.seeds, vec![1, 2, 3, 4, 5]);
        // 4 rotations x 2 flips x 9 shifts for 32-wide images.
        let bank = c.bank_for(32).unwrap();
        assert_eq!(bank.len(), 72);

        let k = ExperimentConfig::knn_defaults();
        assert_eq!(k.backbone, Backbone::Knn);
        assert_eq!(k.alpha, 0.1);
        assert_eq!(k.learning_rate, 1e-3);
        assert_eq!(k.epochs, 20);
        assert_eq!(k.knn_k, 2);
        assert_eq!(k.bank_for(32).unwrap().len(), 2);
    }

    #[test]
    fn validation_rejects_out_of_range_fields() {
        let mut c = ExperimentConfig::default();
        c.concept_fraction = 0.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.alpha = -1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.train_fraction = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn class_selection_resolution() {
        assert_eq!(ClassSelection::All.resolve(3).unwrap(), vec![0, 1, 2]);
        assert_eq!(
            ClassSelection::List(vec![2, 0]).resolve(3).unwrap(),
            vec![2, 0]
        );
        assert!(ClassSelection::List(vec![]).resolve(3).is_err());
        assert!(ClassSelection::List(vec![3]).resolve(3).is_err());
        assert!(ClassSelection::List(vec![0, 0]).resolve(3).is_err());
    }

    #[test]
    fn concept_mask_counts_and_determinism() {
        let mut c = ExperimentConfig::default();
        c.concept_fraction = 1.0;
        assert!(c.concept_mask(8, 1).is_none());

        c.concept_fraction = 0.1;
        let m = c.concept_mask(8, 1).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 1);
        assert_eq!(m, c.concept_mask(8, 1).unwrap());

        c.concept_fraction = 0.25;
        assert_eq!(c.concept_mask(8, 1).unwrap().iter().filter(|&&b| b).count(), 2);
        c.concept_fraction = 0.75;
        assert_eq!(c.concept_mask(8, 1).unwrap().iter().filter(|&&b| b).count(), 6);
    }

    #[test]
    fn cell_grid_is_class_major() {
        let ds = tiny_dataset(4);
        let mut c = tiny_config();
        c.seeds = vec![1, 2, 3];
        let cells = experiment_cells(&c, &ds).unwrap();
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[0], (0, 1));
        assert_eq!(cells[2], (0, 3));
        assert_eq!(cells[3], (1, 1));

        c.k_ind = ClassSelection::List(vec![2]);
        assert_eq!(experiment_cells(&c, &ds).unwrap().len(), 3);
    }

    #[test]
    fn one_vs_all_aggregates_and_is_deterministic() {
        let ds = tiny_dataset(3);
        let c = tiny_config();
        let a = run_one_vs_all(&c, &ds).unwrap();
        assert_eq!(a.report.cells.len(), 6);
        assert_eq!(a.report.per_class.len(), 3);
        assert!(a.failures.is_empty());
        // Grand average is the mean of per-class means.
        let expect = mean(
            &a.report
                .per_class
                .iter()
                .map(|p| p.auc_mean)
                .collect::<Vec<_>>(),
        );
        assert!((a.report.average.auc - expect).abs() < 1e-15);
        // Two seeds -> stds present.
        assert!(a.report.per_class[0].auc_std.is_some());

        let b = run_one_vs_all(&c, &ds).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.histories.len(), b.histories.len());
        for (x, y) in a.histories.iter().zip(&b.histories) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn reaggregation_reproduces_the_report() {
        let ds = tiny_dataset(2);
        let c = tiny_config();
        let out = run_one_vs_all(&c, &ds).unwrap();
        let again =
            RunReport::aggregate(out.report.config.clone(), out.report.cells.clone()).unwrap();
        assert_eq!(out.report, again);
    }

    #[test]
    fn single_seed_omits_std() {
        let ds = tiny_dataset(2);
        let mut c = tiny_config();
        c.seeds = vec![4];
        let out = run_one_vs_all(&c, &ds).unwrap();
        assert!(out.report.per_class[0].auc_std.is_none());
        assert!(out.report.per_class[0].concept_acc_std.is_none());
    }

    #[test]
    fn untrained_model_scores_near_chance() {
        // An untrained encoder is a fixed random projection, so centroid
        // scores already separate classes whenever class templates dominate
        // pixel variance. "Uninformative scores" therefore needs the
        // noise-dominated regime: heavy pixel noise drowns the templates.
        let ds = generate_synthetic(&SyntheticSpec {
            image_size: 8,
            n_classes: 2,
            n_concepts: 4,
            samples_per_class: 40,
            noise_std: 2.0,
            seed: 17,
        })
        .unwrap();
        let mut c = tiny_config();
        c.epochs = 0;
        c.train_fraction = 0.5;
        c.seeds = vec![1, 2, 3];
        let out = run_one_vs_all(&c, &ds).unwrap();
        let auc = out.report.average.auc;
        assert!(
            (auc - 0.5).abs() <= 0.15,
            "untrained AUC {auc} outside the chance band"
        );
    }

    #[test]
    fn knn_backbone_produces_finite_scores() {
        let ds = tiny_dataset(2);
        let mut c = tiny_config();
        c.backbone = Backbone::Knn;
        c.knn_k = 2;
        let out = run_experiment(&c, &ds, 0, 1).unwrap();
        assert!(out.knn.is_some());
        assert!(out.scored.iter().all(|s| s.normality_score.is_finite()));
        assert!(out.auc.is_finite());
    }

    #[test]
    fn sweep_fraction_one_matches_unswept_run() {
        let ds = tiny_dataset(2);
        let c = tiny_config();
        let direct = run_one_vs_all(&c, &ds).unwrap();
        let sweep = sweep_concept_fraction(&c, &ds, &[1.0]).unwrap();
        let mut expected_config = c.clone();
        expected_config.concept_fraction = 1.0;
        assert_eq!(sweep[0].outcome.report.config, expected_config);
        assert_eq!(sweep[0].outcome.report.cells, direct.report.cells);
    }

    #[test]
    fn sweep_validation() {
        let ds = tiny_dataset(2);
        let c = tiny_config();
        assert!(sweep_concept_fraction(&c, &ds, &[]).is_err());
        assert!(sweep_concept_fraction(&c, &ds, &[0.0]).is_err());
        assert!(sweep_concept_fraction(&c, &ds, &[1.1]).is_err());
        assert!(sweep_alpha(&c, &ds, &[-0.5]).is_err());
        assert!(sweep_alpha(&c, &ds, &[f64::NAN]).is_err());
    }

    #[test]
    fn report_average_consistency_under_unbalanced_cells() {
        let cells = vec![
            CellSummary { k_ind: 0, seed: 1, auc: 0.8, concept_acc: 0.9 },
            CellSummary { k_ind: 0, seed: 2, auc: 0.6, concept_acc: 0.7 },
            CellSummary { k_ind: 1, seed: 1, auc: 1.0, concept_acc: 1.0 },
        ];
        let report = RunReport::aggregate(ExperimentConfig::default(), cells).unwrap();
        assert_eq!(report.per_class.len(), 2);
        assert!((report.per_class[0].auc_mean - 0.7).abs() < 1e-15);
        assert_eq!(report.per_class[1].auc_std, None);
        // Mean of per-class means, not of raw cells.
        assert!((report.average.auc - 0.85).abs() < 1e-15);
    }
}
