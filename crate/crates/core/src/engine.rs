//! Two-stage adaptation engine.
//!
//! Stage one (alignment) fits the feature extractor to the frozen
//! prototypes with the bi-directional transport loss while an EM update
//! tracks the class prior of the unlabeled batch stream. Stage two
//! (refinement) freezes a snapshot of the stage-one model, partitions each
//! batch by prediction entropy, and pulls reliable live features toward
//! their prototypes while pushing them away from snapshot features of
//! unreliable look-alike pixels.
//!
//! The classifier (prototype weights) is never updated; only the extractor
//! parameters move, and in stage two the prior is frozen as well.

use serde::Serialize;

use crate::adam::AdamState;
use crate::contrastive::{cl_loss, sample_contrastive_batch};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::network::MlpExtractor;
use crate::pfa::{p2t_loss, pfa_loss, t2p_loss};
use crate::prototypes::{classifier_logits, em_prior_update, PrototypeSet};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::uncertainty::{partition, NegativesThresholdMode, PredictionBatch};

/// Substream ids off the adaptation seed, one per consumer, so stages stay
/// reproducible independently of each other.
pub const STREAM_PFA_BATCHES: u64 = 0;
pub const STREAM_CL_BATCHES: u64 = 1;
pub const STREAM_CL_SAMPLING: u64 = 2;

/// Which alignment objective stage one optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfaObjective {
    /// Both transport directions (default).
    Full,
    /// Feature-to-prototype only; used to study prior-guided coverage.
    T2pOnly,
}

/// Hyperparameters for both adaptation stages.
#[derive(Debug, Clone)]
pub struct AdaptationConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Softmax temperature used when loading checkpoints; the engine itself
    /// always reads the temperature carried by the prototype set.
    pub temperature: f64,
    pub batch_size: usize,
    pub pfa_iters: usize,
    pub cl_iters: usize,
    /// Entropy percentile rank for the reliability threshold, per class.
    pub alpha: f64,
    /// Max queries per class per iteration.
    pub k_queries: usize,
    /// Negatives per query.
    pub n_negatives: usize,
    /// Minimum probability rank for a negative candidate.
    pub rank_threshold: usize,
    pub em_momentum: f64,
    pub seed: u64,
    pub negatives_mode: NegativesThresholdMode,
    pub pfa_objective: PfaObjective,
    /// Keep the alignment term in the stage-two objective.
    pub cl_keep_pfa_loss: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            temperature: 0.1,
            batch_size: 16,
            pfa_iters: 200,
            cl_iters: 400,
            alpha: 80.0,
            k_queries: 64,
            n_negatives: 256,
            rank_threshold: 3,
            em_momentum: 0.9,
            seed: 1,
            negatives_mode: NegativesThresholdMode::PseudoLabel,
            pfa_objective: PfaObjective::Full,
            cl_keep_pfa_loss: false,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 100.0) {
            return Err(Error::invalid("alpha must lie in (0, 100]"));
        }
        if self.k_queries == 0 || self.n_negatives == 0 {
            return Err(Error::invalid("k_queries and n_negatives must be positive"));
        }
        if !(2..=class_count).contains(&self.rank_threshold) {
            return Err(Error::invalid(format!(
                "rank_threshold {} outside [2, {class_count}]",
                self.rank_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.em_momentum) {
            return Err(Error::invalid("em_momentum must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A feature extractor plus its frozen cosine classifier.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub extractor: MlpExtractor<T>,
    pub protos: PrototypeSet<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(extractor: MlpExtractor<T>, protos: PrototypeSet<T>) -> Result<Self> {
        if extractor.feature_dim() != protos.feature_dim() {
            return Err(Error::invalid(format!(
                "extractor feature dim {} does not match prototype dim {}",
                extractor.feature_dim(),
                protos.feature_dim()
            )));
        }
        Ok(Model { extractor, protos })
    }

    /// Features for a batch of inputs (cache discarded).
    pub fn features(&self, inputs: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.extractor.forward(inputs)?.0)
    }

    /// Class probabilities and argmax labels for a batch of inputs.
    pub fn predict(&self, inputs: &Matrix<T>) -> Result<(Matrix<T>, Vec<usize>)> {
        let features = self.features(inputs)?;
        self.predict_from_features(&features)
    }

    /// Class probabilities and argmax labels for precomputed features.
    pub fn predict_from_features(&self, features: &Matrix<T>) -> Result<(Matrix<T>, Vec<usize>)> {
        let logits = classifier_logits(features, &self.protos)?;
        let mut probs = Matrix::zeros(logits.rows(), logits.cols());
        let mut labels = Vec::with_capacity(logits.rows());
        for i in 0..logits.rows() {
            let row = linalg::softmax(logits.row(i), T::one())?;
            labels.push(linalg::argmax(&row));
            probs.row_mut(i).copy_from_slice(&row);
        }
        Ok((probs, labels))
    }
}

/// Per-iteration record of the alignment stage.
#[derive(Debug, Clone, Serialize)]
pub struct PfaStageReport {
    pub iterations: usize,
    pub batch_size: usize,
    pub t2p: Vec<f64>,
    pub p2t: Vec<f64>,
    pub total: Vec<f64>,
    /// Prior after each iteration's EM update.
    pub prior_trace: Vec<Vec<f64>>,
    pub final_prior: Vec<f64>,
}

/// Per-iteration record of the refinement stage.
#[derive(Debug, Clone, Serialize)]
pub struct ClStageReport {
    pub iterations: usize,
    pub batch_size: usize,
    /// Contrastive loss per iteration; `null` when no class had both
    /// queries and negatives in the batch.
    pub cl: Vec<Option<f64>>,
    pub sampled_queries: Vec<usize>,
    /// Iterations that sampled nothing and therefore took no step.
    pub empty_iterations: usize,
    /// Total number of (iteration, class) skips.
    pub skipped_class_events: usize,
}

/// Reports from a full two-stage run.
#[derive(Debug, Clone, Serialize)]
pub struct AdaptReport {
    pub pfa: Option<PfaStageReport>,
    pub cl: Option<ClStageReport>,
}

/// Cycles through a dataset in shuffled epochs of fixed-size batches.
struct BatchSampler {
    order: Vec<usize>,
    position: usize,
    batch: usize,
    rng: SeededRng,
}

impl BatchSampler {
    fn new(count: usize, batch: usize, rng: SeededRng) -> Self {
        let batch = batch.min(count);
        BatchSampler { order: (0..count).collect(), position: count, batch, rng }
    }

    fn next(&mut self) -> &[usize] {
        if self.position + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.position = 0;
        }
        let slice = &self.order[self.position..self.position + self.batch];
        self.position += self.batch;
        slice
    }
}

fn to_f64_vec<T: Scalar>(values: &[T]) -> Vec<f64> {
    values.iter().map(|v| v.to_f64().unwrap()).collect()
}

/// Stage one: aligns the extractor to the frozen prototypes.
///
/// Returns the adapted model (same prototypes, EM-updated prior) and the
/// loss/prior trace. The input model is untouched.
pub fn run_pfa_stage<T: Scalar>(
    model: &Model<T>,
    inputs: &Matrix<T>,
    config: &AdaptationConfig,
) -> Result<(Model<T>, PfaStageReport)> {
    config.validate(model.protos.class_count())?;
    if inputs.rows() == 0 {
        return Err(Error::invalid("empty adaptation set"));
    }
    if inputs.cols() != model.extractor.input_dim() {
        return Err(Error::invalid("input dimension does not match the extractor"));
    }

    let mut extractor = model.extractor.clone();
    let mut protos = model.protos.clone();
    let root = SeededRng::new(config.seed);
    let mut sampler = BatchSampler::new(inputs.rows(), config.batch_size, root.derive(STREAM_PFA_BATCHES));
    let mut adam = AdamState::new(
        extractor.param_count(),
        T::from(config.learning_rate).unwrap(),
        T::from(config.weight_decay).unwrap(),
    )?;
    let momentum = T::from(config.em_momentum).unwrap();

    let mut report = PfaStageReport {
        iterations: config.pfa_iters,
        batch_size: config.batch_size.min(inputs.rows()),
        t2p: Vec::with_capacity(config.pfa_iters),
        p2t: Vec::with_capacity(config.pfa_iters),
        total: Vec::with_capacity(config.pfa_iters),
        prior_trace: Vec::with_capacity(config.pfa_iters),
        final_prior: to_f64_vec(model.protos.prior()),
    };

    for _ in 0..config.pfa_iters {
        let batch_rows = sampler.next().to_vec();
        let batch = inputs.gather_rows(&batch_rows)?;
        let (features, cache) = extractor.forward(&batch)?;

        let prior = em_prior_update(&features, &protos, momentum)?;
        protos = protos.with_prior(prior)?;
        report.prior_trace.push(to_f64_vec(protos.prior()));

        let t2p = t2p_loss(&features, &protos)?;
        let p2t = p2t_loss(&features, &protos)?;
        report.t2p.push(t2p.value.to_f64().unwrap());
        report.p2t.push(p2t.value.to_f64().unwrap());
        report.total.push((t2p.value + p2t.value).to_f64().unwrap());

        let step_loss = match config.pfa_objective {
            PfaObjective::Full => t2p.combine(&p2t)?,
            PfaObjective::T2pOnly => t2p,
        };
        let grads = extractor.backward(&cache, &step_loss.grad_features)?;
        let mut params = extractor.flatten_params();
        adam.step(&mut params, &grads.flatten())?;
        extractor.assign_params(&params)?;
    }

    report.final_prior = to_f64_vec(protos.prior());
    Ok((Model { extractor, protos }, report))
}

/// Stage two: contrastive refinement against a frozen snapshot.
///
/// `snapshot` provides the predictions that define reliability and the
/// negative features; `model` provides the live extractor being trained.
/// In the standard pipeline both start as the stage-one result. The prior
/// is frozen throughout.
pub fn run_cl_stage<T: Scalar>(
    model: &Model<T>,
    snapshot: &Model<T>,
    inputs: &Matrix<T>,
    config: &AdaptationConfig,
) -> Result<(Model<T>, ClStageReport)> {
    config.validate(model.protos.class_count())?;
    if inputs.rows() == 0 {
        return Err(Error::invalid("empty adaptation set"));
    }
    if inputs.cols() != model.extractor.input_dim() {
        return Err(Error::invalid("input dimension does not match the extractor"));
    }
    if snapshot.protos.class_count() != model.protos.class_count() {
        return Err(Error::invalid("snapshot and live class counts differ"));
    }

    let mut extractor = model.extractor.clone();
    let protos = model.protos.clone();
    let classes = protos.class_count();
    let alpha = vec![config.alpha; classes];
    let tau = protos.temperature();

    let root = SeededRng::new(config.seed);
    let mut sampler = BatchSampler::new(inputs.rows(), config.batch_size, root.derive(STREAM_CL_BATCHES));
    let mut sampling_rng = root.derive(STREAM_CL_SAMPLING);
    let mut adam = AdamState::new(
        extractor.param_count(),
        T::from(config.learning_rate).unwrap(),
        T::from(config.weight_decay).unwrap(),
    )?;

    let mut report = ClStageReport {
        iterations: config.cl_iters,
        batch_size: config.batch_size.min(inputs.rows()),
        cl: Vec::with_capacity(config.cl_iters),
        sampled_queries: Vec::with_capacity(config.cl_iters),
        empty_iterations: 0,
        skipped_class_events: 0,
    };

    for _ in 0..config.cl_iters {
        let batch_rows = sampler.next().to_vec();
        let batch = inputs.gather_rows(&batch_rows)?;

        let snap_features = snapshot.features(&batch)?;
        let (snap_probs, _) = snapshot.predict_from_features(&snap_features)?;
        let pred = PredictionBatch::from_probs(snap_probs)?;
        let part = partition(&pred, &alpha, config.rank_threshold, config.negatives_mode)?;

        let (live_features, cache) = extractor.forward(&batch)?;
        let contrastive = sample_contrastive_batch(
            &part,
            &live_features,
            &snap_features,
            &protos,
            config.k_queries,
            config.n_negatives,
            &mut sampling_rng,
        )?;
        report.skipped_class_events += contrastive.skipped_classes().len();
        report.sampled_queries.push(contrastive.query_count());

        if contrastive.is_empty() {
            report.cl.push(None);
            report.empty_iterations += 1;
            continue;
        }

        let loss = cl_loss(&contrastive, tau)?;
        report.cl.push(Some(loss.value.to_f64().unwrap()));
        let step_loss =
            if config.cl_keep_pfa_loss { loss.combine(&pfa_loss(&live_features, &protos)?)? } else { loss };

        let grads = extractor.backward(&cache, &step_loss.grad_features)?;
        let mut params = extractor.flatten_params();
        adam.step(&mut params, &grads.flatten())?;
        extractor.assign_params(&params)?;
    }

    Ok((Model { extractor, protos }, report))
}

/// Full pipeline: alignment, snapshot, refinement.
pub fn adapt<T: Scalar>(
    source: &Model<T>,
    inputs: &Matrix<T>,
    config: &AdaptationConfig,
) -> Result<(Model<T>, AdaptReport)> {
    let (aligned, pfa_report) = run_pfa_stage(source, inputs, config)?;
    let (refined, cl_report) = run_cl_stage(&aligned, &aligned, inputs, config)?;
    Ok((refined, AdaptReport { pfa: Some(pfa_report), cl: Some(cl_report) }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn toy_model(seed: u64) -> Model<f64> {
        let mut rng = SeededRng::new(seed);
        let extractor = MlpExtractor::seeded(&[4, 8, 3], &mut rng).unwrap();
        let weights = Matrix::from_vec(
            3,
            3,
            (0..9).map(|_| rng.normal::<f64>()).collect(),
        )
        .unwrap();
        let protos = PrototypeSet::new(weights, vec![1.0, 1.0, 1.0], 0.1).unwrap();
        Model::new(extractor, protos).unwrap()
    }

    fn toy_inputs(seed: u64, rows: usize) -> Matrix<f64> {
        let mut rng = SeededRng::new(seed);
        Matrix::from_vec(rows, 4, (0..rows * 4).map(|_| rng.normal::<f64>()).collect()).unwrap()
    }

    fn quick_config() -> AdaptationConfig {
        AdaptationConfig {
            pfa_iters: 12,
            cl_iters: 12,
            batch_size: 8,
            k_queries: 4,
            n_negatives: 6,
            rank_threshold: 2,
            learning_rate: 1e-3,
            ..AdaptationConfig::default()
        }
    }

    #[test]
    fn prototypes_stay_frozen_through_both_stages() {
        let model = toy_model(1);
        let inputs = toy_inputs(2, 40);
        let before: Vec<u64> =
            model.protos.weights().data().iter().map(|v| v.to_bits()).collect();
        let (adapted, _) = adapt(&model, &inputs, &quick_config()).unwrap();
        let after: Vec<u64> =
            adapted.protos.weights().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn pfa_stage_reduces_alignment_loss() {
        let model = toy_model(3);
        let inputs = toy_inputs(4, 60);
        let config = AdaptationConfig {
            pfa_iters: 150,
            batch_size: 16,
            learning_rate: 3e-3,
            ..AdaptationConfig::default()
        };
        let (_, report) = run_pfa_stage(&model, &inputs, &config).unwrap();
        let early: f64 = report.total[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = report.total[report.total.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(late < early, "alignment loss did not decrease: {early} -> {late}");
    }

    #[test]
    fn zero_iteration_stages_return_the_input_model() {
        let model = toy_model(5);
        let inputs = toy_inputs(6, 20);
        let config = AdaptationConfig {
            pfa_iters: 0,
            cl_iters: 0,
            rank_threshold: 2,
            ..AdaptationConfig::default()
        };
        let (adapted, report) = adapt(&model, &inputs, &config).unwrap();
        assert_eq!(
            model.extractor.flatten_params(),
            adapted.extractor.flatten_params()
        );
        assert_eq!(report.pfa.unwrap().iterations, 0);
        assert_eq!(report.cl.unwrap().iterations, 0);
    }

    #[test]
    fn adaptation_is_deterministic_for_equal_seeds() {
        let model = toy_model(7);
        let inputs = toy_inputs(8, 50);
        let config = quick_config();
        let (a, _) = adapt(&model, &inputs, &config).unwrap();
        let (b, _) = adapt(&model, &inputs, &config).unwrap();
        let bits = |m: &Model<f64>| -> Vec<u64> {
            m.extractor.flatten_params().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));

        let mut other = config.clone();
        other.seed = 2;
        let (c, _) = adapt(&model, &inputs, &other).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn em_prior_tracks_an_imbalanced_stream() {
        // Inputs drawn so that the extractor's random features cluster; we
        // only check that the prior moves away from uniform and stays a
        // distribution.
        let model = toy_model(9);
        let inputs = toy_inputs(10, 80);
        let config = AdaptationConfig {
            pfa_iters: 60,
            batch_size: 20,
            ..AdaptationConfig::default()
        };
        let (adapted, report) = run_pfa_stage(&model, &inputs, &config).unwrap();
        let prior = adapted.protos.prior();
        let sum: f64 = prior.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert_eq!(report.prior_trace.len(), 60);
        assert!(report.final_prior.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn cl_stage_report_tracks_query_counts() {
        let model = toy_model(11);
        let inputs = toy_inputs(12, 40);
        let (aligned, _) = run_pfa_stage(&model, &inputs, &quick_config()).unwrap();
        let (_, report) = run_cl_stage(&aligned, &aligned, &inputs, &quick_config()).unwrap();
        assert_eq!(report.cl.len(), 12);
        assert_eq!(report.sampled_queries.len(), 12);
        for (value, &count) in report.cl.iter().zip(&report.sampled_queries) {
            assert_eq!(value.is_none(), count == 0);
            if let Some(v) = value {
                assert!(*v >= 0.0);
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let model = toy_model(13);
        let inputs = toy_inputs(14, 10);
        for broken in [
            AdaptationConfig { learning_rate: 0.0, ..quick_config() },
            AdaptationConfig { batch_size: 0, ..quick_config() },
            AdaptationConfig { alpha: 0.0, ..quick_config() },
            AdaptationConfig { alpha: 101.0, ..quick_config() },
            AdaptationConfig { rank_threshold: 1, ..quick_config() },
            AdaptationConfig { rank_threshold: 4, ..quick_config() },
            AdaptationConfig { em_momentum: 1.5, ..quick_config() },
        ] {
            assert!(adapt(&model, &inputs, &broken).is_err());
        }
    }


    #[test]
    fn one_hot_snapshot_predictions_make_refinement_a_no_op() {
        // A near-zero temperature drives every softmax row to an exact
        // one-hot, so no prediction is unreliable and every refinement
        // iteration skips.
        let mut rng = SeededRng::new(31);
        let extractor = MlpExtractor::seeded(&[4, 8, 3], &mut rng).unwrap();
        let weights =
            Matrix::from_vec(3, 3, (0..9).map(|_| rng.normal::<f64>()).collect()).unwrap();
        let protos = PrototypeSet::new(weights, vec![1.0, 1.0, 1.0], 1e-7).unwrap();
        let model = Model::new(extractor, protos).unwrap();
        let inputs = toy_inputs(32, 24);

        let (probs, _) = model.predict(&inputs).unwrap();
        for r in 0..probs.rows() {
            let ones = probs.row(r).iter().filter(|&&p| p == 1.0).count();
            let zeros = probs.row(r).iter().filter(|&&p| p == 0.0).count();
            assert_eq!((ones, zeros), (1, probs.cols() - 1), "row {r} is not one-hot");
        }

        let (refined, report) = run_cl_stage(&model, &model, &inputs, &quick_config()).unwrap();
        assert_eq!(refined.extractor.flatten_params(), model.extractor.flatten_params());
        assert!(report.cl.iter().all(|v| v.is_none()));
    }
}
