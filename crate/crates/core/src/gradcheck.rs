//! Seeded finite-difference verification suites for every analytic
//! gradient path: the alignment and contrastive losses over features, and
//! each loss composed with the extractor.

use crate::contrastive::{cl_loss, ClassGroup, ContrastiveBatch};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::network::MlpExtractor;
use crate::pfa::{self, LossResult};
use crate::prototypes::PrototypeSet;
use crate::rng::SeededRng;

/// Central-difference step.
pub const FD_EPSILON: f64 = 1e-5;
/// Minimum feature-row norm for a usable random instance. The losses
/// normalize feature rows, so curvature grows without bound as a row
/// approaches the origin and finite differences stop resolving it.
const NORM_FLOOR: f64 = 0.25;
/// Minimum absolute hidden pre-activation for a usable extractor instance.
/// A parameter probe shifts pre-activations by at most about the step times
/// the layer-input scale; entries closer to the leaky ReLU fold than this
/// can be straddled by the central difference, which then measures a chord
/// across two linear pieces instead of a derivative.
const PREACT_FLOOR: f64 = 1e-3;
/// Denominator floor for relative error. Central differences at the step
/// above carry round-off near 1e-10, so gradient entries below this
/// magnitude are compared absolutely rather than against their own size.
const GRAD_FLOOR: f64 = 1e-5;
/// Maximum allowed relative error between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub suite: &'static str,
    pub case: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Names of all suites, in execution order.
pub const SUITE_NAMES: [&str; 8] = [
    "t2p/features",
    "p2t/features",
    "pfa/features",
    "cl/features",
    "t2p/extractor",
    "p2t/extractor",
    "pfa/extractor",
    "cl/extractor",
];

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn random_prototypes(
    rng: &mut SeededRng,
    classes: usize,
    dim: usize,
    temperature: f64,
) -> PrototypeSet<f64> {
    let weights = random_matrix(rng, classes, dim);
    let raw: Vec<f64> = (0..classes).map(|_| rng.uniform::<f64>() + 0.1).collect();
    let total: f64 = raw.iter().sum();
    let prior = raw.into_iter().map(|p| p / total).collect();
    PrototypeSet::new(weights, prior, temperature).unwrap()
}

/// Random contrastive batch shape: groups over a live feature matrix,
/// snapshot negatives, and unit prototype rows.
struct ClInstance {
    snapshot: Matrix<f64>,
    prototypes: Matrix<f64>,
    groups: Vec<ClassGroup>,
}

impl ClInstance {
    fn random(rng: &mut SeededRng, live_rows: usize, classes: usize, dim: usize) -> Self {
        let snapshot_rows = live_rows + 2;
        let snapshot = random_matrix(rng, snapshot_rows, dim).normalized_rows().unwrap().0;
        let prototypes = random_matrix(rng, classes, dim).normalized_rows().unwrap().0;
        let mut groups = Vec::new();
        for class in 0..classes {
            let queries = 1 + rng.below(2.min(live_rows));
            let query_rows = rng.sample_distinct(live_rows, queries);
            let negative_rows = (0..queries)
                .map(|_| (0..1 + rng.below(3)).map(|_| rng.below(snapshot_rows)).collect())
                .collect();
            groups.push(ClassGroup { class, query_rows, negative_rows });
        }
        ClInstance { snapshot, prototypes, groups }
    }

    fn batch(&self, live: Matrix<f64>) -> Result<ContrastiveBatch<f64>> {
        ContrastiveBatch::from_parts(
            live,
            self.snapshot.clone(),
            self.prototypes.clone(),
            self.groups.clone(),
            Vec::new(),
        )
    }
}

/// Checks an analytic feature gradient against central differences over
/// every feature entry. Returns the largest relative error.
fn check_feature_gradient(
    features: &Matrix<f64>,
    loss: &dyn Fn(&Matrix<f64>) -> Result<LossResult<f64>>,
) -> Result<f64> {
    let analytic = loss(features)?;
    let mut worst = 0.0f64;
    for r in 0..features.rows() {
        for c in 0..features.cols() {
            let mut plus = features.clone();
            plus.set(r, c, plus.get(r, c) + FD_EPSILON);
            let mut minus = features.clone();
            minus.set(r, c, minus.get(r, c) - FD_EPSILON);
            let numeric = (loss(&plus)?.value - loss(&minus)?.value) / (2.0 * FD_EPSILON);
            worst = worst.max(rel_err(analytic.grad_features.get(r, c), numeric));
        }
    }
    Ok(worst)
}

/// Checks the chain through the extractor: analytic parameter gradients
/// from backward against central differences on the flattened parameters.
fn check_extractor_gradient(
    extractor: &MlpExtractor<f64>,
    inputs: &Matrix<f64>,
    loss: &dyn Fn(&Matrix<f64>) -> Result<LossResult<f64>>,
) -> Result<f64> {
    let (features, cache) = extractor.forward(inputs)?;
    let result = loss(&features)?;
    let analytic = extractor.backward(&cache, &result.grad_features)?.flatten();
    let params = extractor.flatten_params();
    let mut worst = 0.0f64;
    let mut probe = extractor.clone();
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus[i] += FD_EPSILON;
        probe.assign_params(&plus)?;
        let up = loss(&probe.forward(inputs)?.0)?.value;
        let mut minus = params.clone();
        minus[i] -= FD_EPSILON;
        probe.assign_params(&minus)?;
        let down = loss(&probe.forward(inputs)?.0)?.value;
        let numeric = (up - down) / (2.0 * FD_EPSILON);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

type LossFn<'a> = Box<dyn Fn(&Matrix<f64>) -> Result<LossResult<f64>> + 'a>;

fn feature_loss<'a>(
    suite: &str,
    protos: &'a PrototypeSet<f64>,
    cl: &'a ClInstance,
    temperature: f64,
) -> LossFn<'a> {
    match suite {
        s if s.starts_with("t2p") => Box::new(move |f| pfa::t2p_loss(f, protos)),
        s if s.starts_with("p2t") => Box::new(move |f| pfa::p2t_loss(f, protos)),
        s if s.starts_with("pfa") => Box::new(move |f| pfa::pfa_loss(f, protos)),
        _ => Box::new(move |f| cl_loss(&cl.batch(f.clone())?, temperature)),
    }
}

/// Runs `cases` seeded random instances of one named suite.
pub fn run_suite(suite: &'static str, seed: u64, cases: usize) -> Result<Vec<GradCheckCase>> {
    let index = SUITE_NAMES
        .iter()
        .position(|&s| s == suite)
        .ok_or_else(|| Error::invalid(format!("unknown gradient suite {suite:?}")))? as u64;
    let root = SeededRng::new(seed).derive(index);
    let mut results = Vec::with_capacity(cases);
    for case in 0..cases {
        let mut rng = root.derive(case as u64);
        let batch = 2 + rng.below(7);
        let classes = 2 + rng.below(4);
        let dim = 2 + rng.below(15);
        // Moderate temperatures: the gradient formulas treat the temperature
        // as one scalar on the logits, but at sharp settings the softmax
        // saturates and leaves entries below what a 1e-5 step resolves.
        let temperature = 0.25 + 0.75 * rng.uniform::<f64>();
        let protos = random_prototypes(&mut rng, classes, dim, temperature);
        let cl = ClInstance::random(&mut rng, batch, classes, dim);
        let loss = feature_loss(suite, &protos, &cl, temperature);
        let max_rel_err = if suite.ends_with("features") {
            // Same conditioning requirement as below: rows near the origin
            // make the normalized losses too stiff for a 1e-5 step.
            let mut features = random_matrix(&mut rng, batch, dim);
            for attempt in 0.. {
                let min_norm = (0..features.rows())
                    .map(|r| linalg::dot(features.row(r), features.row(r)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                if min_norm >= NORM_FLOOR {
                    break;
                }
                if attempt == 1000 {
                    return Err(Error::degenerate("no well-conditioned features after 1000 draws"));
                }
                features = random_matrix(&mut rng, batch, dim);
            }
            check_feature_gradient(&features, loss.as_ref())?
        } else {
            let hidden = 2 + rng.below(5);
            let input_dim = 2 + rng.below(4);
            let mut net_rng = rng.derive(1000);
            // A feature row near the origin makes the row normalization stiff
            // enough that third-order terms dominate the central difference,
            // and a hidden pre-activation on the leaky ReLU fold breaks it
            // outright; redraw the net and inputs together until both clear
            // their floors, since a near-zero weight row can pin a unit's
            // pre-activations near the fold for every input.
            let mut extractor =
                MlpExtractor::<f64>::seeded(&[input_dim, hidden, dim], &mut net_rng)?;
            let mut inputs = random_matrix(&mut rng, batch, input_dim);
            for attempt in 0.. {
                let (features, cache) = extractor.forward(&inputs)?;
                let min_norm = (0..features.rows())
                    .map(|r| linalg::dot(features.row(r), features.row(r)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                if min_norm >= NORM_FLOOR && cache.min_hidden_preactivation() >= PREACT_FLOOR {
                    break;
                }
                if attempt == 1000 {
                    return Err(Error::degenerate("no well-conditioned instance after 1000 draws"));
                }
                extractor = MlpExtractor::seeded(&[input_dim, hidden, dim], &mut net_rng)?;
                inputs = random_matrix(&mut rng, batch, input_dim);
            }
            check_extractor_gradient(&extractor, &inputs, loss.as_ref())?
        };
        results.push(GradCheckCase {
            suite,
            case,
            max_rel_err,
            passed: max_rel_err < FD_TOLERANCE,
        });
    }
    Ok(results)
}

/// Runs every suite with `cases` instances each.
pub fn run_all_suites(seed: u64, cases: usize) -> Result<Vec<GradCheckCase>> {
    let mut all = Vec::with_capacity(SUITE_NAMES.len() * cases);
    for suite in SUITE_NAMES {
        all.extend(run_suite(suite, seed, cases)?);
    }
    Ok(all)
}
