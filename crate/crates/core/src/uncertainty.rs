//! Entropy-based partition of a prediction batch into reliable queries and
//! unreliable negative candidates.
//!
//! Per class `c`, the reliability threshold `gamma_c` is the nearest-rank
//! `alpha_c` percentile of the entropies of pixels pseudo-labeled `c`.
//! Queries for `c` are its pseudo-labeled pixels at or below the threshold.
//! Negative candidates for `c` are unreliable pixels whose predicted
//! probability ranks `c` at or beyond a rank cutoff, so `c` is plausible
//! enough to be a hard negative but never the pixel's top choice.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::scalar::Scalar;

/// Per-pixel class probabilities with derived pseudo-labels and entropies.
#[derive(Debug, Clone)]
pub struct PredictionBatch<T> {
    probs: Matrix<T>,
    pseudo_labels: Vec<usize>,
    entropies: Vec<T>,
}

impl<T: Scalar> PredictionBatch<T> {
    /// Validates each row as a probability distribution and derives the
    /// pseudo-label (argmax, ties to the lower index) and entropy.
    pub fn from_probs(probs: Matrix<T>) -> Result<Self> {
        if probs.rows() == 0 || probs.cols() < 2 {
            return Err(Error::invalid("prediction batch needs >= 1 row and >= 2 classes"));
        }
        let mut pseudo_labels = Vec::with_capacity(probs.rows());
        let mut entropies = Vec::with_capacity(probs.rows());
        for row in probs.row_iter() {
            entropies.push(linalg::entropy(row)?);
            pseudo_labels.push(linalg::argmax(row));
        }
        Ok(PredictionBatch { probs, pseudo_labels, entropies })
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn class_count(&self) -> usize {
        self.probs.cols()
    }

    pub fn probs(&self) -> &Matrix<T> {
        &self.probs
    }

    pub fn pseudo_labels(&self) -> &[usize] {
        &self.pseudo_labels
    }

    pub fn entropies(&self) -> &[T] {
        &self.entropies
    }
}

/// Which threshold decides that a pixel is unreliable when collecting
/// negative candidates for class `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativesThresholdMode {
    /// Compare the pixel's entropy against the threshold of its own
    /// pseudo-label (default).
    PseudoLabel,
    /// Compare against the threshold of the candidate class `c` itself.
    TargetClass,
}

/// Query and negative index sets per class, plus the thresholds that
/// produced them.
#[derive(Debug, Clone)]
pub struct UncertaintyPartition<T> {
    pub batch_size: usize,
    pub thresholds: Vec<T>,
    /// `queries[c]` lists batch rows usable as reliable anchors of class `c`.
    pub queries: Vec<Vec<usize>>,
    /// `negatives[c]` lists batch rows usable as negatives against class `c`.
    pub negatives: Vec<Vec<usize>>,
}

/// Nearest-rank entropy percentile per class. A class with no
/// pseudo-labeled pixels gets negative infinity: it can have no reliable
/// pixels, and every candidate counts as unreliable for it.
pub fn class_thresholds<T: Scalar>(pred: &PredictionBatch<T>, alpha: &[f64]) -> Result<Vec<T>> {
    let classes = pred.class_count();
    if alpha.len() != classes {
        return Err(Error::invalid(format!(
            "{} percentile ranks for {} classes",
            alpha.len(),
            classes
        )));
    }
    let mut grouped: Vec<Vec<T>> = vec![Vec::new(); classes];
    for (i, &label) in pred.pseudo_labels().iter().enumerate() {
        grouped[label].push(pred.entropies()[i]);
    }
    let mut thresholds = Vec::with_capacity(classes);
    for (c, values) in grouped.iter().enumerate() {
        if values.is_empty() {
            thresholds.push(T::neg_infinity());
        } else {
            thresholds.push(linalg::percentile(values, alpha[c])?);
        }
    }
    Ok(thresholds)
}

/// Reliable pixels per class: pseudo-label `c` and entropy at or below the
/// class threshold. Indices are ascending.
pub fn select_queries<T: Scalar>(pred: &PredictionBatch<T>, thresholds: &[T]) -> Vec<Vec<usize>> {
    let mut queries: Vec<Vec<usize>> = vec![Vec::new(); pred.class_count()];
    for (i, &label) in pred.pseudo_labels().iter().enumerate() {
        if pred.entropies()[i] <= thresholds[label] {
            queries[label].push(i);
        }
    }
    queries
}

/// Negative candidates per class: strictly unreliable pixels whose
/// probability ranking places class `c` at rank `rank_threshold` or worse
/// favorability (rank counts from 1 = most probable). `rank_threshold` must
/// lie in [2, class_count]. Indices are ascending.
pub fn select_negatives<T: Scalar>(
    pred: &PredictionBatch<T>,
    thresholds: &[T],
    rank_threshold: usize,
    mode: NegativesThresholdMode,
) -> Result<Vec<Vec<usize>>> {
    let classes = pred.class_count();
    if !(2..=classes).contains(&rank_threshold) {
        return Err(Error::invalid(format!(
            "rank threshold {rank_threshold} outside [2, {classes}]"
        )));
    }
    if thresholds.len() != classes {
        return Err(Error::invalid("one threshold per class required"));
    }
    let mut negatives: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in 0..pred.len() {
        let entropy = pred.entropies()[i];
        let own_unreliable = entropy > thresholds[pred.pseudo_labels()[i]];
        if mode == NegativesThresholdMode::PseudoLabel && !own_unreliable {
            continue;
        }
        let ranks = linalg::category_order(pred.probs().row(i));
        for (c, negatives_c) in negatives.iter_mut().enumerate() {
            let unreliable = match mode {
                NegativesThresholdMode::PseudoLabel => own_unreliable,
                NegativesThresholdMode::TargetClass => entropy > thresholds[c],
            };
            if unreliable && ranks[c] >= rank_threshold {
                negatives_c.push(i);
            }
        }
    }
    Ok(negatives)
}

/// Full partition: thresholds, queries, and negatives in one call.
pub fn partition<T: Scalar>(
    pred: &PredictionBatch<T>,
    alpha: &[f64],
    rank_threshold: usize,
    mode: NegativesThresholdMode,
) -> Result<UncertaintyPartition<T>> {
    let thresholds = class_thresholds(pred, alpha)?;
    let queries = select_queries(pred, &thresholds);
    let negatives = select_negatives(pred, &thresholds, rank_threshold, mode)?;
    Ok(UncertaintyPartition { batch_size: pred.len(), thresholds, queries, negatives })
}
