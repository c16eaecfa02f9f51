//! Contrastive refinement of unreliable regions.
//!
//! For each class with both reliable queries and negative candidates, a
//! fixed-size contrastive batch is sampled: queries come from the live
//! feature extractor, the positive is the frozen class prototype, and the
//! negatives are snapshot features of pixels for which the class is an
//! implausible-but-tempting assignment. The loss is an InfoNCE term per
//! query; gradients flow only into the live query features, never into the
//! positive, the negatives, or the snapshot.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::pfa::LossResult;
use crate::prototypes::PrototypeSet;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::uncertainty::UncertaintyPartition;

/// Sampled queries and negatives for one class.
#[derive(Debug, Clone)]
pub struct ClassGroup {
    pub class: usize,
    /// Rows of the live batch serving as queries, in sampling order.
    pub query_rows: Vec<usize>,
    /// Per query, the snapshot rows serving as its negatives.
    pub negative_rows: Vec<Vec<usize>>,
}

/// A fully materialized contrastive batch.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch<T> {
    live: Matrix<T>,
    snapshot_normalized: Matrix<T>,
    prototypes: Matrix<T>,
    groups: Vec<ClassGroup>,
    skipped_classes: Vec<usize>,
    query_count: usize,
}

impl<T: Scalar> ContrastiveBatch<T> {
    /// Assembles a batch from explicit parts, validating shapes and indices.
    /// `snapshot_normalized` must already have unit rows.
    pub fn from_parts(
        live: Matrix<T>,
        snapshot_normalized: Matrix<T>,
        prototypes: Matrix<T>,
        groups: Vec<ClassGroup>,
        skipped_classes: Vec<usize>,
    ) -> Result<Self> {
        if live.cols() != snapshot_normalized.cols() || live.cols() != prototypes.cols() {
            return Err(Error::invalid("live, snapshot, and prototype dimensions differ"));
        }
        let mut query_count = 0;
        for group in &groups {
            if group.class >= prototypes.rows() {
                return Err(Error::invalid("class group index out of range"));
            }
            if group.negative_rows.len() != group.query_rows.len() {
                return Err(Error::invalid("one negative set per query required"));
            }
            if group.query_rows.iter().any(|&q| q >= live.rows()) {
                return Err(Error::invalid("query row out of range"));
            }
            if group
                .negative_rows
                .iter()
                .flatten()
                .any(|&n| n >= snapshot_normalized.rows())
            {
                return Err(Error::invalid("negative row out of range"));
            }
            if group.negative_rows.iter().any(Vec::is_empty) {
                return Err(Error::invalid("every query needs at least one negative"));
            }
            query_count += group.query_rows.len();
        }
        Ok(ContrastiveBatch {
            live,
            snapshot_normalized,
            prototypes,
            groups,
            skipped_classes,
            query_count,
        })
    }

    pub fn groups(&self) -> &[ClassGroup] {
        &self.groups
    }

    /// Classes skipped for lack of queries or negatives.
    pub fn skipped_classes(&self) -> &[usize] {
        &self.skipped_classes
    }

    /// Total number of sampled queries across classes.
    pub fn query_count(&self) -> usize {
        self.query_count
    }

    pub fn is_empty(&self) -> bool {
        self.query_count == 0
    }

    pub fn live_rows(&self) -> usize {
        self.live.rows()
    }
}

/// Samples a contrastive batch from an uncertainty partition.
///
/// Classes are visited in ascending order. A class is skipped when it has
/// no queries or no negative candidates. `min(k, |queries_c|)` queries are
/// drawn without replacement; each query draws `n` negatives, without
/// replacement when the candidate pool is large enough and with
/// replacement otherwise.
pub fn sample_contrastive_batch<T: Scalar>(
    partition: &UncertaintyPartition<T>,
    live: &Matrix<T>,
    snapshot: &Matrix<T>,
    protos: &PrototypeSet<T>,
    k: usize,
    n: usize,
    rng: &mut SeededRng,
) -> Result<ContrastiveBatch<T>> {
    if k == 0 || n == 0 {
        return Err(Error::invalid("query and negative counts must be positive"));
    }
    if live.rows() != partition.batch_size || snapshot.rows() != partition.batch_size {
        return Err(Error::invalid("feature batches do not match the partition size"));
    }
    if partition.queries.len() != protos.class_count() {
        return Err(Error::invalid("partition class count does not match prototypes"));
    }
    live.ensure_finite("live features")?;
    let (snapshot_normalized, _) = snapshot.normalized_rows()?;

    let mut groups = Vec::new();
    let mut skipped = Vec::new();
    for class in 0..protos.class_count() {
        let queries = &partition.queries[class];
        let candidates = &partition.negatives[class];
        if queries.is_empty() || candidates.is_empty() {
            skipped.push(class);
            continue;
        }
        let take = k.min(queries.len());
        let query_rows: Vec<usize> =
            rng.sample_distinct(queries.len(), take).into_iter().map(|p| queries[p]).collect();
        let mut negative_rows = Vec::with_capacity(take);
        for _ in 0..take {
            let rows: Vec<usize> = if candidates.len() >= n {
                rng.sample_distinct(candidates.len(), n).into_iter().map(|p| candidates[p]).collect()
            } else {
                (0..n).map(|_| candidates[rng.below(candidates.len())]).collect()
            };
            negative_rows.push(rows);
        }
        groups.push(ClassGroup { class, query_rows, negative_rows });
    }

    ContrastiveBatch::from_parts(
        live.clone(),
        snapshot_normalized,
        protos.weights().clone(),
        groups,
        skipped,
    )
}

/// InfoNCE loss over a contrastive batch, averaged over all sampled
/// queries, with the analytic gradient with respect to the live features.
///
/// Per query `q` with unit direction `z`, positive prototype `p`, and unit
/// negatives `m_j`, the term is `-ln softmax_0([<z,p>, <z,m_j>...] / tau)`.
/// Rows of the gradient that are not query rows stay zero.
pub fn cl_loss<T: Scalar>(batch: &ContrastiveBatch<T>, temperature: T) -> Result<LossResult<T>> {
    if temperature <= T::zero() || !temperature.is_finite() {
        return Err(Error::invalid("temperature must be positive and finite"));
    }
    if batch.is_empty() {
        return Err(Error::invalid("contrastive batch has no queries"));
    }
    let dim = batch.live.cols();
    let inv_total = T::one() / T::from(batch.query_count).unwrap();
    let mut value = T::zero();
    let mut grad = Matrix::zeros(batch.live.rows(), dim);

    for group in &batch.groups {
        let positive = batch.prototypes.row(group.class);
        for (query_slot, &row) in group.query_rows.iter().enumerate() {
            let raw = batch.live.row(row);
            let norm = linalg::norm(raw);
            if norm <= T::zero() {
                return Err(Error::degenerate(format!("query row {row} has zero norm")));
            }
            let z: Vec<T> = raw.iter().map(|&v| v / norm).collect();

            let negatives = &group.negative_rows[query_slot];
            let sim_pos = clamp_unit(linalg::dot(&z, positive));
            let mut sims = Vec::with_capacity(negatives.len());
            let mut max_logit = sim_pos;
            for &neg_row in negatives {
                let s = clamp_unit(linalg::dot(&z, batch.snapshot_normalized.row(neg_row)));
                if s > max_logit {
                    max_logit = s;
                }
                sims.push(s);
            }

            // Stable log-sum-exp of [sim_pos, sims...] / tau.
            let mut sum_exp = ((sim_pos - max_logit) / temperature).exp();
            for &s in &sims {
                sum_exp += ((s - max_logit) / temperature).exp();
            }
            let lse = max_logit / temperature + sum_exp.ln();
            value += lse - sim_pos / temperature;

            // Softmax responsibilities over [positive, negatives].
            let p_pos = ((sim_pos - max_logit) / temperature).exp() / sum_exp;
            let scale = inv_total / (temperature * norm);
            let mut radial = (p_pos - T::one()) * sim_pos;
            let out = grad.row_mut(row);
            for (slot, &w) in out.iter_mut().zip(positive) {
                *slot = *slot + scale * (p_pos - T::one()) * w;
            }
            for (&neg_row, &s) in negatives.iter().zip(&sims) {
                let p_neg = ((s - max_logit) / temperature).exp() / sum_exp;
                radial += p_neg * s;
                let neg = batch.snapshot_normalized.row(neg_row);
                for (slot, &w) in out.iter_mut().zip(neg) {
                    *slot = *slot + scale * p_neg * w;
                }
            }
            for (slot, &zv) in out.iter_mut().zip(&z) {
                *slot = *slot - scale * radial * zv;
            }
        }
    }

    value *= inv_total;
    grad.ensure_finite("contrastive gradient")?;
    Ok(LossResult { value, grad_features: grad })
}

fn clamp_unit<T: Scalar>(v: T) -> T {
    v.max(-T::one()).min(T::one())
}
