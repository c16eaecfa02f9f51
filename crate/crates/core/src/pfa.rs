//! Bi-directional transport alignment losses.
//!
//! Both directions couple a feature batch to the frozen prototypes through
//! cosine distance `d = 1 - <proto, f_hat>` and temperature-scaled softmax
//! weights:
//!
//! * feature-to-prototype: each feature distributes its mass over
//!   prototypes via the prior-weighted transport conditional, and the loss
//!   is the average expected distance per feature;
//! * prototype-to-feature: each prototype distributes its prior mass over
//!   the batch via a per-class softmax, and the loss is the prior-weighted
//!   expected distance per prototype.
//!
//! Every loss returns its value together with the exact analytic gradient
//! with respect to the raw (unnormalized) features. Prototypes and prior
//! receive no gradient. Because the losses only see normalized features,
//! each gradient row is orthogonal to its feature row.

use crate::error::Result;
use crate::linalg::Matrix;
use crate::prototypes::{batch_geometry, transport_rows, BatchGeometry, PrototypeSet};
use crate::scalar::Scalar;

/// A scalar loss value and its gradient with respect to the raw features.
#[derive(Debug, Clone)]
pub struct LossResult<T> {
    pub value: T,
    pub grad_features: Matrix<T>,
}

impl<T: Scalar> LossResult<T> {
    /// Element-wise sum of two loss results over the same batch.
    pub fn combine(mut self, other: &LossResult<T>) -> Result<LossResult<T>> {
        self.value += other.value;
        self.grad_features.add_assign(&other.grad_features)?;
        Ok(self)
    }
}

/// Propagates a gradient on the similarity matrix back to raw features.
///
/// With `s_ic = <proto_c, f_i / ||f_i||>`, the chain rule gives
/// `d s_ic / d f_i = (proto_c - s_ic * f_hat_i) / ||f_i||`.
fn similarity_grad_to_features<T: Scalar>(
    geometry: &BatchGeometry<T>,
    protos: &PrototypeSet<T>,
    grad_sims: &Matrix<T>,
) -> Matrix<T> {
    let (batch, classes) = (grad_sims.rows(), grad_sims.cols());
    let dim = protos.feature_dim();
    let mut grad = Matrix::zeros(batch, dim);
    for i in 0..batch {
        let g_row = grad_sims.row(i);
        let f_hat = geometry.normalized.row(i);
        let out = grad.row_mut(i);
        let mut radial = T::zero();
        for c in 0..classes {
            let g = g_row[c];
            if g == T::zero() {
                continue;
            }
            radial += g * geometry.sims.get(i, c);
            for (slot, &w) in out.iter_mut().zip(protos.prototype(c)) {
                *slot = *slot + g * w;
            }
        }
        let inv_norm = T::one() / geometry.norms[i];
        for (slot, &fh) in out.iter_mut().zip(f_hat) {
            *slot = (*slot - radial * fh) * inv_norm;
        }
    }
    grad
}

/// Feature-to-prototype alignment loss.
///
/// `L = (1/B) sum_i sum_c d_ic * pi_ic` where `pi` is the transport
/// conditional under the current prior.
pub fn t2p_loss<T: Scalar>(features: &Matrix<T>, protos: &PrototypeSet<T>) -> Result<LossResult<T>> {
    let geometry = batch_geometry(features, protos)?;
    let tau = protos.temperature();
    let plan = transport_rows(&geometry.sims, protos.prior(), tau);
    let (batch, classes) = (plan.rows(), plan.cols());
    let inv_batch = T::one() / T::from(batch).unwrap();

    let mut value = T::zero();
    let mut grad_sims = Matrix::zeros(batch, classes);
    for i in 0..batch {
        let mut mean_distance = T::zero();
        for c in 0..classes {
            let d = T::one() - geometry.sims.get(i, c);
            mean_distance += d * plan.get(i, c);
        }
        value += mean_distance;
        let g_row = grad_sims.row_mut(i);
        for c in 0..classes {
            let d = T::one() - geometry.sims.get(i, c);
            g_row[c] = inv_batch * plan.get(i, c) * ((d - mean_distance) / tau - T::one());
        }
    }
    value *= inv_batch;

    let grad_features = similarity_grad_to_features(&geometry, protos, &grad_sims);
    grad_features.ensure_finite("feature-to-prototype gradient")?;
    Ok(LossResult { value, grad_features })
}

/// Prototype-to-feature alignment loss.
///
/// Each class spreads its prior mass over the batch with a softmax in the
/// batch direction: `w_ci = exp(s_ic / tau) / sum_i' exp(s_i'c / tau)`, and
/// `L = sum_c prior_c sum_i d_ic * w_ci`.
pub fn p2t_loss<T: Scalar>(features: &Matrix<T>, protos: &PrototypeSet<T>) -> Result<LossResult<T>> {
    let geometry = batch_geometry(features, protos)?;
    let tau = protos.temperature();
    let (batch, classes) = (geometry.sims.rows(), geometry.sims.cols());

    // Per-class softmax over the batch, with max subtraction.
    let mut weights = Matrix::zeros(batch, classes);
    for c in 0..classes {
        let mut max = T::neg_infinity();
        for i in 0..batch {
            if geometry.sims.get(i, c) > max {
                max = geometry.sims.get(i, c);
            }
        }
        let mut sum = T::zero();
        for i in 0..batch {
            let e = ((geometry.sims.get(i, c) - max) / tau).exp();
            weights.set(i, c, e);
            sum += e;
        }
        for i in 0..batch {
            weights.set(i, c, weights.get(i, c) / sum);
        }
    }

    let mut value = T::zero();
    let mut grad_sims = Matrix::zeros(batch, classes);
    for c in 0..classes {
        let prior_c = protos.prior()[c];
        let mut mean_distance = T::zero();
        for i in 0..batch {
            let d = T::one() - geometry.sims.get(i, c);
            mean_distance += d * weights.get(i, c);
        }
        value += prior_c * mean_distance;
        for i in 0..batch {
            let d = T::one() - geometry.sims.get(i, c);
            let g = prior_c * weights.get(i, c) * ((d - mean_distance) / tau - T::one());
            grad_sims.set(i, c, g);
        }
    }

    let grad_features = similarity_grad_to_features(&geometry, protos, &grad_sims);
    grad_features.ensure_finite("prototype-to-feature gradient")?;
    Ok(LossResult { value, grad_features })
}

/// Combined alignment loss: the plain sum of the two directions, in value
/// and in gradient.
pub fn pfa_loss<T: Scalar>(features: &Matrix<T>, protos: &PrototypeSet<T>) -> Result<LossResult<T>> {
    let t2p = t2p_loss(features, protos)?;
    let p2t = p2t_loss(features, protos)?;
    t2p.combine(&p2t)
}
