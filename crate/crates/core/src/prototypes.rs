//! Class prototypes and the transport machinery that couples them to
//! feature batches.
//!
//! A [`PrototypeSet`] is a frozen cosine classifier: one unit-norm anchor
//! per class plus a class-prior estimate and a softmax temperature. The
//! transport conditional assigns each feature a distribution over
//! prototypes, weighting similarity by the prior, and an EM-style update
//! re-estimates the prior from those assignments.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::scalar::Scalar;

/// Frozen class anchors with a prior and a temperature.
#[derive(Debug, Clone)]
pub struct PrototypeSet<T> {
    weights: Matrix<T>,
    prior: Vec<T>,
    temperature: T,
}

impl<T: Scalar> PrototypeSet<T> {
    /// Builds a prototype set. Rows of `weights` are L2-normalized here;
    /// the prior is validated as non-negative with positive mass and
    /// normalized to sum to 1. At least two classes are required.
    pub fn new(weights: Matrix<T>, prior: Vec<T>, temperature: T) -> Result<Self> {
        if weights.rows() < 2 {
            return Err(Error::invalid("a prototype set needs at least two classes"));
        }
        if prior.len() != weights.rows() {
            return Err(Error::invalid(format!(
                "prior has {} entries for {} classes",
                prior.len(),
                weights.rows()
            )));
        }
        if temperature <= T::zero() || !temperature.is_finite() {
            return Err(Error::invalid("temperature must be positive and finite"));
        }
        let (weights, _) = weights.normalized_rows()?;
        let prior = normalize_prior(prior)?;
        Ok(PrototypeSet { weights, prior, temperature })
    }

    /// Same prototypes and temperature with a replacement prior.
    pub fn with_prior(&self, prior: Vec<T>) -> Result<Self> {
        if prior.len() != self.class_count() {
            return Err(Error::invalid("replacement prior has the wrong length"));
        }
        Ok(PrototypeSet {
            weights: self.weights.clone(),
            prior: normalize_prior(prior)?,
            temperature: self.temperature,
        })
    }

    pub fn class_count(&self) -> usize {
        self.weights.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn prototype(&self, class: usize) -> &[T] {
        self.weights.row(class)
    }

    pub fn prior(&self) -> &[T] {
        &self.prior
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }
}

fn normalize_prior<T: Scalar>(prior: Vec<T>) -> Result<Vec<T>> {
    if prior.iter().any(|p| !p.is_finite() || *p < T::zero()) {
        return Err(Error::invalid("prior entries must be finite and non-negative"));
    }
    let sum: T = prior.iter().copied().sum();
    if sum <= T::zero() {
        return Err(Error::degenerate("prior has no mass"));
    }
    Ok(prior.into_iter().map(|p| p / sum).collect())
}

/// Row-stochastic assignment of features to prototypes.
#[derive(Debug, Clone)]
pub struct TransportPlan<T> {
    probs: Matrix<T>,
}

impl<T: Scalar> TransportPlan<T> {
    /// Per-feature distributions over classes; rows sum to 1.
    pub fn probs(&self) -> &Matrix<T> {
        &self.probs
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.probs
    }
}

/// Cosine distance `1 - <a, b> / (||a|| ||b||)`, in [0, 2].
pub fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::invalid("cosine distance of different-length vectors"));
    }
    let na = linalg::norm(a);
    let nb = linalg::norm(b);
    if na <= T::zero() || nb <= T::zero() {
        return Err(Error::degenerate("cosine distance with a zero vector"));
    }
    let sim = (linalg::dot(a, b) / (na * nb)).max(-T::one()).min(T::one());
    Ok(T::one() - sim)
}

/// Shared geometry of a feature batch against a prototype set: normalized
/// features, their original norms, and the clamped cosine similarities.
pub(crate) struct BatchGeometry<T> {
    pub normalized: Matrix<T>,
    pub norms: Vec<T>,
    pub sims: Matrix<T>,
}

pub(crate) fn batch_geometry<T: Scalar>(
    features: &Matrix<T>,
    protos: &PrototypeSet<T>,
) -> Result<BatchGeometry<T>> {
    if features.rows() == 0 {
        return Err(Error::invalid("empty feature batch"));
    }
    if features.cols() != protos.feature_dim() {
        return Err(Error::invalid(format!(
            "feature dimension {} does not match prototype dimension {}",
            features.cols(),
            protos.feature_dim()
        )));
    }
    features.ensure_finite("feature batch")?;
    let (normalized, norms) = features.normalized_rows()?;
    let mut sims = normalized.matmul_nt(protos.weights())?;
    for v in sims.data_mut() {
        *v = (*v).max(-T::one()).min(T::one());
    }
    Ok(BatchGeometry { normalized, norms, sims })
}

/// Row-wise prior-weighted softmax of `sims / temperature`.
///
/// The max is taken over classes with positive prior so that zero-prior
/// classes can never absorb mass or underflow the whole row.
pub(crate) fn transport_rows<T: Scalar>(sims: &Matrix<T>, prior: &[T], temperature: T) -> Matrix<T> {
    let (rows, classes) = (sims.rows(), sims.cols());
    let mut out = Matrix::zeros(rows, classes);
    for i in 0..rows {
        let s = sims.row(i);
        let mut max = T::neg_infinity();
        for c in 0..classes {
            if prior[c] > T::zero() && s[c] > max {
                max = s[c];
            }
        }
        let row = out.row_mut(i);
        let mut sum = T::zero();
        for c in 0..classes {
            let w = if prior[c] > T::zero() {
                prior[c] * ((s[c] - max) / temperature).exp()
            } else {
                T::zero()
            };
            row[c] = w;
            sum += w;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Cosine classifier logits: `<proto_c, f_hat> / temperature` per feature
/// row and class.
pub fn classifier_logits<T: Scalar>(
    features: &Matrix<T>,
    protos: &PrototypeSet<T>,
) -> Result<Matrix<T>> {
    let geometry = batch_geometry(features, protos)?;
    let mut logits = geometry.sims;
    let inv_tau = T::one() / protos.temperature();
    for v in logits.data_mut() {
        *v *= inv_tau;
    }
    Ok(logits)
}

/// Transport conditional: for each feature row, a distribution over
/// prototypes proportional to `prior_c * exp(<proto_c, f_hat> / temperature)`.
pub fn transport_conditional<T: Scalar>(
    features: &Matrix<T>,
    protos: &PrototypeSet<T>,
) -> Result<TransportPlan<T>> {
    let geometry = batch_geometry(features, protos)?;
    let probs = transport_rows(&geometry.sims, protos.prior(), protos.temperature());
    Ok(TransportPlan { probs })
}

/// One EM step on the class prior.
///
/// E-step: transport conditional under the current prior. M-step: average
/// the plan over the batch and blend it into the old prior with momentum
/// `rho` in [0, 1] (`rho = 1` leaves the prior unchanged). The result is
/// renormalized; prototypes are untouched.
pub fn em_prior_update<T: Scalar>(
    features: &Matrix<T>,
    protos: &PrototypeSet<T>,
    momentum: T,
) -> Result<Vec<T>> {
    if !(momentum >= T::zero() && momentum <= T::one()) {
        return Err(Error::invalid("momentum must lie in [0, 1]"));
    }
    let plan = transport_conditional(features, protos)?;
    let probs = plan.probs();
    let batch = T::from(probs.rows()).unwrap();
    let classes = protos.class_count();
    let mut blended = vec![T::zero(); classes];
    for c in 0..classes {
        let mut mean = T::zero();
        for i in 0..probs.rows() {
            mean += probs.get(i, c);
        }
        mean /= batch;
        blended[c] = momentum * protos.prior()[c] + (T::one() - momentum) * mean;
    }
    normalize_prior(blended)
}
