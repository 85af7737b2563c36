//! Evaluation metrics: ROC-AUC via midranks, thresholded concept accuracy,
//! and Spearman rank correlation with a permutation test.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::math;
use crate::{Error, Result};

/// 1-based ranks with ties sharing their average (mid) rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = alloc::vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average of ranks i+1..=j+1.
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve by the Mann-Whitney U statistic.
///
/// `labels` are 1 for positives (anomalies) and 0 for negatives; higher
/// scores are read as more positive. Ties contribute one half, exactly as in
/// the pair-counting definition.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!(
            "labels must be 0 or 1, found {bad}"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores contain a non-finite value".to_string()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "roc_auc needs both classes, found {n_pos} positives and {n_neg} negatives"
        )));
    }
    let ranks = midranks(scores);
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&r, _)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fraction of concept bits recovered after thresholding probabilities at
/// 0.5 (a probability of exactly 0.5 rounds up to 1).
pub fn concept_accuracy(probs: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probability rows but {} label rows",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::InvalidArgument(
            "concept_accuracy needs at least one row".to_string(),
        ));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (i, (p_row, l_row)) in probs.iter().zip(labels).enumerate() {
        if p_row.len() != l_row.len() {
            return Err(Error::ShapeMismatch(format!(
                "row {i}: {} probabilities but {} labels",
                p_row.len(),
                l_row.len()
            )));
        }
        for (&p, &l) in p_row.iter().zip(l_row) {
            if l > 1 {
                return Err(Error::InvalidArgument(format!(
                    "row {i}: concept label {l} is not binary"
                )));
            }
            let predicted = u8::from(p >= 0.5);
            correct += usize::from(predicted == l);
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Spearman rank correlation: Pearson correlation of midranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} x values but {} y values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument(
            "spearman_rho needs at least 2 points".to_string(),
        ));
    }
    let rx = midranks(xs);
    let ry = midranks(ys);
    pearson(&rx, &ry)
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument(
            "correlation undefined for a constant sequence".to_string(),
        ));
    }
    Ok(sxy / math::sqrt(sxx * syy))
}

/// Seeded permutation test for a positive Spearman correlation.
///
/// Returns `(rho, p)` where `p` is the one-sided probability, under random
/// pairing, of a correlation at least as large as the observed one, with the
/// customary +1 smoothing so the p-value is never exactly zero.
pub fn spearman_permutation_test(
    xs: &[f64],
    ys: &[f64],
    n_permutations: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_permutations == 0 {
        return Err(Error::InvalidArgument(
            "permutation test needs at least one permutation".to_string(),
        ));
    }
    let observed = spearman_rho(xs, ys)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled: Vec<f64> = ys.to_vec();
    let mut at_least = 0usize;
    for _ in 0..n_permutations {
        shuffled.shuffle(&mut rng);
        let rho = spearman_rho(xs, &shuffled)?;
        if rho >= observed {
            at_least += 1;
        }
    }
    let p = (at_least + 1) as f64 / (n_permutations + 1) as f64;
    Ok((observed, p))
}
