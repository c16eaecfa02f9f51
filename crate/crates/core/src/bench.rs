//! Synthetic Gaussian domain-shift benchmark: dataset generation, source
//! pretraining, and evaluation metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint::format_value;
use crate::engine::Model;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::metrics;
use crate::network::MlpExtractor;
use crate::prototypes::PrototypeSet;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::uncertainty::{class_thresholds, select_queries, PredictionBatch};

/// Substreams of the dataset seed, one per (domain, split).
const STREAM_SOURCE_TRAIN: u64 = 10;
const STREAM_SOURCE_EVAL: u64 = 11;
const STREAM_TARGET_TRAIN: u64 = 12;
const STREAM_TARGET_EVAL: u64 = 13;

/// Substreams of the pretraining seed.
const STREAM_EXTRACTOR_INIT: u64 = 20;
const STREAM_CLASSIFIER_INIT: u64 = 21;
const STREAM_EPOCH_ORDER: u64 = 22;

/// Dataset partition tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::format(format!("unknown split tag {other:?}"))),
        }
    }
}

/// Feature vectors with class labels, all belonging to one split.
#[derive(Debug, Clone)]
pub struct LabeledDataset<T> {
    inputs: Matrix<T>,
    labels: Vec<usize>,
    split: Split,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(inputs: Matrix<T>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(LabeledDataset { inputs, labels, split })
    }

    pub fn inputs(&self) -> &Matrix<T> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Samples per class. Labels at or above `classes` are rejected.
    pub fn class_counts(&self, classes: usize) -> Result<Vec<usize>> {
        let mut counts = vec![0usize; classes];
        for &label in &self.labels {
            if label >= classes {
                return Err(Error::invalid(format!("label {label} out of range for {classes} classes")));
            }
            counts[label] += 1;
        }
        Ok(counts)
    }

    /// CSV encoding with header `split,label,x0,...`; 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,label");
        for d in 0..self.input_dim() {
            let _ = write!(out, ",x{d}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{},{}", self.split.as_str(), self.labels[i]);
            for &v in self.inputs.row(i) {
                let _ = write!(out, ",{}", format_value(v));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("empty dataset file"))?;
        let mut fields = header.split(',');
        if fields.next() != Some("split") || fields.next() != Some("label") {
            return Err(Error::format("dataset header must start with split,label"));
        }
        let mut dim = 0usize;
        for field in fields {
            if field != format!("x{dim}") {
                return Err(Error::format(format!("unexpected header column {field:?}")));
            }
            dim += 1;
        }
        if dim == 0 {
            return Err(Error::format("dataset header declares no feature columns"));
        }
        let mut split = None;
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let tag = Split::parse(fields.next().unwrap_or(""))?;
            match split {
                None => split = Some(tag),
                Some(s) if s != tag => {
                    return Err(Error::format("dataset file mixes split tags"));
                }
                _ => {}
            }
            let label = fields
                .next()
                .and_then(|f| f.parse::<usize>().ok())
                .ok_or_else(|| Error::format(format!("bad label on data row {lineno}")))?;
            labels.push(label);
            let mut got = 0usize;
            for field in fields {
                let value = field
                    .parse::<f64>()
                    .ok()
                    .and_then(T::from)
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::format(format!("bad value on data row {lineno}")))?;
                data.push(value);
                got += 1;
            }
            if got != dim {
                return Err(Error::format(format!("data row {lineno} has {got} values, expected {dim}")));
            }
        }
        let split = split.ok_or_else(|| Error::format("dataset file has no data rows"))?;
        let rows = labels.len();
        LabeledDataset::new(Matrix::from_vec(rows, dim, data)?, labels, split)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

/// Affine map applied to target draws: `x -> scale * Q * x + shift`.
#[derive(Debug, Clone)]
pub struct TargetTransform<T> {
    rotation: Matrix<T>,
    scale: T,
    shift: Vec<T>,
}

impl<T: Scalar> TargetTransform<T> {
    /// Maximum deviation of `Q^T Q` from the identity.
    const ORTHOGONALITY_TOL: f64 = 1e-9;

    pub fn new(rotation: Matrix<T>, scale: T, shift: Vec<T>) -> Result<Self> {
        let dim = rotation.rows();
        if rotation.cols() != dim || dim == 0 {
            return Err(Error::invalid("rotation must be square and nonempty"));
        }
        if shift.len() != dim {
            return Err(Error::invalid("shift length must match rotation size"));
        }
        if shift.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("shift must be finite".into()));
        }
        if !(scale > T::zero()) || !scale.is_finite() {
            return Err(Error::invalid("scale must be positive and finite"));
        }
        let gram = rotation.matmul_tn(&rotation)?;
        let tol = T::from(Self::ORTHOGONALITY_TOL).unwrap();
        for r in 0..dim {
            for c in 0..dim {
                let expected = if r == c { T::one() } else { T::zero() };
                if (gram.get(r, c) - expected).abs() > tol {
                    return Err(Error::invalid("rotation matrix is not orthogonal"));
                }
            }
        }
        Ok(TargetTransform { rotation, scale, shift })
    }

    pub fn identity(dim: usize) -> Self {
        let mut rotation = Matrix::zeros(dim, dim);
        for d in 0..dim {
            rotation.set(d, d, T::one());
        }
        TargetTransform { rotation, scale: T::one(), shift: vec![T::zero(); dim] }
    }

    pub fn rotation(&self) -> &Matrix<T> {
        &self.rotation
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn shift(&self) -> &[T] {
        &self.shift
    }

    /// Applies the map to every row of `inputs`.
    pub fn apply(&self, inputs: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = inputs.matmul_nt(&self.rotation)?;
        out.scale_in_place(self.scale);
        for r in 0..out.rows() {
            for (slot, &t) in out.row_mut(r).iter_mut().zip(&self.shift) {
                *slot += t;
            }
        }
        Ok(out)
    }
}

fn validate_proportions<T: Scalar>(proportions: &[T], classes: usize) -> Result<()> {
    if proportions.len() != classes {
        return Err(Error::invalid(format!(
            "{} proportions for {classes} classes",
            proportions.len()
        )));
    }
    let mut sum = T::zero();
    for &p in proportions {
        if !(p >= T::zero()) || !p.is_finite() {
            return Err(Error::invalid("proportions must be finite and nonnegative"));
        }
        sum += p;
    }
    if (sum - T::one()).abs() > T::from(1e-9).unwrap() {
        return Err(Error::invalid("proportions must sum to one"));
    }
    Ok(())
}

/// Class sample counts for `n` draws, floor first, leftovers by largest
/// fractional part (ties to the lower class index).
pub fn largest_remainder_counts<T: Scalar>(proportions: &[T], n: usize) -> Result<Vec<usize>> {
    validate_proportions(proportions, proportions.len())?;
    if n == 0 {
        return Err(Error::invalid("cannot split zero samples"));
    }
    let mut counts = Vec::with_capacity(proportions.len());
    let mut fracs = Vec::with_capacity(proportions.len());
    let mut assigned = 0usize;
    for &p in proportions {
        let exact = p.to_f64().unwrap() * n as f64;
        let floor = exact.floor() as usize;
        counts.push(floor);
        fracs.push(exact - floor as f64);
        assigned += floor;
    }
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| fracs[b].partial_cmp(&fracs[a]).unwrap().then(a.cmp(&b)));
    for &class in order.iter().take(n.saturating_sub(assigned)) {
        counts[class] += 1;
    }
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 && proportions[class] > T::zero() {
            return Err(Error::invalid(format!(
                "class {class} has positive proportion but rounds to zero samples at n={n}"
            )));
        }
    }
    Ok(counts)
}

/// Full description of one source/target domain-shift scenario.
#[derive(Debug, Clone)]
pub struct DomainShiftSpec<T> {
    class_means: Matrix<T>,
    class_std: T,
    separation: T,
    source_proportions: Vec<T>,
    target_proportions: Vec<T>,
    transform: TargetTransform<T>,
    train_count: usize,
    eval_count: usize,
    seed: u64,
}

impl<T: Scalar> DomainShiftSpec<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        class_means: Matrix<T>,
        class_std: T,
        separation: T,
        source_proportions: Vec<T>,
        target_proportions: Vec<T>,
        transform: TargetTransform<T>,
        train_count: usize,
        eval_count: usize,
        seed: u64,
    ) -> Result<Self> {
        let classes = class_means.rows();
        if classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if !(class_std > T::zero()) || !class_std.is_finite() {
            return Err(Error::invalid("class std must be positive and finite"));
        }
        if !(separation >= T::zero()) || !separation.is_finite() {
            return Err(Error::invalid("separation must be nonnegative and finite"));
        }
        for a in 0..classes {
            for b in (a + 1)..classes {
                let dist = linalg::norm(
                    &class_means
                        .row(a)
                        .iter()
                        .zip(class_means.row(b))
                        .map(|(&x, &y)| x - y)
                        .collect::<Vec<T>>(),
                );
                if dist + T::from(1e-12).unwrap() < separation {
                    return Err(Error::invalid(format!(
                        "classes {a} and {b} are closer than the declared separation"
                    )));
                }
            }
        }
        validate_proportions(&source_proportions, classes)?;
        validate_proportions(&target_proportions, classes)?;
        if transform.rotation().rows() != class_means.cols() {
            return Err(Error::invalid("transform dimension must match input dimension"));
        }
        if train_count == 0 || eval_count == 0 {
            return Err(Error::invalid("split sample counts must be positive"));
        }
        Ok(DomainShiftSpec {
            class_means,
            class_std,
            separation,
            source_proportions,
            target_proportions,
            transform,
            train_count,
            eval_count,
            seed,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_means.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.class_means.cols()
    }

    pub fn class_means(&self) -> &Matrix<T> {
        &self.class_means
    }

    pub fn class_std(&self) -> T {
        self.class_std
    }

    pub fn separation(&self) -> T {
        self.separation
    }

    pub fn source_proportions(&self) -> &[T] {
        &self.source_proportions
    }

    pub fn target_proportions(&self) -> &[T] {
        &self.target_proportions
    }

    pub fn transform(&self) -> &TargetTransform<T> {
        &self.transform
    }

    pub fn train_count(&self) -> usize {
        self.train_count
    }

    pub fn eval_count(&self) -> usize {
        self.eval_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Scalar knobs from which a full spec is derived.
#[derive(Debug, Clone)]
pub struct ScenarioParams<T> {
    pub class_count: usize,
    pub input_dim: usize,
    pub class_std: T,
    pub separation: T,
    pub rotation_angle: T,
    pub scale: T,
    pub shift_norm: T,
    pub source_proportions: Vec<T>,
    pub target_proportions: Vec<T>,
    pub train_count: usize,
    pub eval_count: usize,
    pub seed: u64,
    /// Seed for the rotation plane and shift direction, separate from the
    /// draw seed so the same geometry hosts many resamples.
    pub geometry_seed: u64,
}

/// Rotation by `angle` in the plane spanned by orthonormal `u`, `v`.
fn plane_rotation<T: Scalar>(u: &[T], v: &[T], angle: T) -> Matrix<T> {
    let dim = u.len();
    let (sin, cos) = angle.sin_cos();
    let mut q = Matrix::zeros(dim, dim);
    for r in 0..dim {
        for c in 0..dim {
            let mut entry = if r == c { T::one() } else { T::zero() };
            entry += (cos - T::one()) * (u[r] * u[c] + v[r] * v[c]);
            entry += sin * (u[r] * v[c] - v[r] * u[c]);
            q.set(r, c, entry);
        }
    }
    q
}

fn random_unit_vector<T: Scalar>(dim: usize, rng: &mut SeededRng) -> Vec<T> {
    loop {
        let v: Vec<T> = (0..dim).map(|_| rng.normal()).collect();
        if linalg::norm(&v) > T::from(1e-6).unwrap() {
            return linalg::l2_normalize(&v).unwrap();
        }
    }
}

fn random_orthonormal_pair<T: Scalar>(dim: usize, rng: &mut SeededRng) -> (Vec<T>, Vec<T>) {
    let u = random_unit_vector::<T>(dim, rng);
    loop {
        let mut v: Vec<T> = (0..dim).map(|_| rng.normal()).collect();
        let proj = linalg::dot(&v, &u);
        for (slot, &uu) in v.iter_mut().zip(&u) {
            *slot -= proj * uu;
        }
        if linalg::norm(&v) > T::from(1e-6).unwrap() {
            return (u, linalg::l2_normalize(&v).unwrap());
        }
    }
}

/// Expands scenario knobs into a concrete spec: axis-aligned class means
/// with exact pairwise separation, a random-plane rotation, and a random
/// shift direction of the requested norm.
pub fn build_spec<T: Scalar>(params: &ScenarioParams<T>) -> Result<DomainShiftSpec<T>> {
    if params.class_count < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if params.input_dim < params.class_count {
        return Err(Error::invalid("axis-aligned means need input_dim >= class_count"));
    }
    if !(params.separation > T::zero()) || !params.separation.is_finite() {
        return Err(Error::invalid("separation must be positive and finite"));
    }
    if !(params.shift_norm >= T::zero()) || !params.shift_norm.is_finite() {
        return Err(Error::invalid("shift norm must be nonnegative and finite"));
    }
    if !params.rotation_angle.is_finite() {
        return Err(Error::NonFinite("rotation angle must be finite".into()));
    }
    let radius = params.separation / T::from(2.0).unwrap().sqrt();
    let mut means = Matrix::zeros(params.class_count, params.input_dim);
    for c in 0..params.class_count {
        means.set(c, c, radius);
    }
    let mut geometry = SeededRng::new(params.geometry_seed);
    let (u, v) = random_orthonormal_pair::<T>(params.input_dim, &mut geometry);
    let rotation = plane_rotation(&u, &v, params.rotation_angle);
    let direction = random_unit_vector::<T>(params.input_dim, &mut geometry);
    let shift: Vec<T> = direction.iter().map(|&d| d * params.shift_norm).collect();
    let transform = TargetTransform::new(rotation, params.scale, shift)?;
    DomainShiftSpec::new(
        means,
        params.class_std,
        params.separation,
        params.source_proportions.clone(),
        params.target_proportions.clone(),
        transform,
        params.train_count,
        params.eval_count,
        params.seed,
    )
}

/// Train and eval splits of one domain.
#[derive(Debug, Clone)]
pub struct DomainSamples<T> {
    pub train: LabeledDataset<T>,
    pub eval: LabeledDataset<T>,
}

fn draw_split<T: Scalar>(
    spec: &DomainShiftSpec<T>,
    proportions: &[T],
    count: usize,
    split: Split,
    mut rng: SeededRng,
    transform: Option<&TargetTransform<T>>,
) -> Result<LabeledDataset<T>> {
    let counts = largest_remainder_counts(proportions, count)?;
    let dim = spec.input_dim();
    let mut inputs = Matrix::zeros(count, dim);
    let mut labels = Vec::with_capacity(count);
    let mut row = 0usize;
    for (class, &n) in counts.iter().enumerate() {
        let mean = spec.class_means().row(class).to_vec();
        for _ in 0..n {
            for (d, slot) in inputs.row_mut(row).iter_mut().enumerate() {
                *slot = mean[d] + spec.class_std() * rng.normal();
            }
            labels.push(class);
            row += 1;
        }
    }
    let mut order: Vec<usize> = (0..count).collect();
    rng.shuffle(&mut order);
    let inputs = inputs.gather_rows(&order)?;
    let labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    let inputs = match transform {
        Some(t) => t.apply(&inputs)?,
        None => inputs,
    };
    LabeledDataset::new(inputs, labels, split)
}

/// Draws both domains, each with a train and an eval split. Target rows
/// are transformed draws with the target proportions.
pub fn generate_domains<T: Scalar>(
    spec: &DomainShiftSpec<T>,
) -> Result<(DomainSamples<T>, DomainSamples<T>)> {
    let root = SeededRng::new(spec.seed());
    let source = DomainSamples {
        train: draw_split(
            spec,
            spec.source_proportions(),
            spec.train_count(),
            Split::Train,
            root.derive(STREAM_SOURCE_TRAIN),
            None,
        )?,
        eval: draw_split(
            spec,
            spec.source_proportions(),
            spec.eval_count(),
            Split::Eval,
            root.derive(STREAM_SOURCE_EVAL),
            None,
        )?,
    };
    let target = DomainSamples {
        train: draw_split(
            spec,
            spec.target_proportions(),
            spec.train_count(),
            Split::Train,
            root.derive(STREAM_TARGET_TRAIN),
            Some(spec.transform()),
        )?,
        eval: draw_split(
            spec,
            spec.target_proportions(),
            spec.eval_count(),
            Split::Eval,
            root.derive(STREAM_TARGET_EVAL),
            Some(spec.transform()),
        )?,
    };
    Ok((source, target))
}

/// Supervised source-training settings.
#[derive(Debug, Clone)]
pub struct PretrainConfig<T> {
    /// Full layer chain, input through feature width.
    pub layer_sizes: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: T,
    pub weight_decay: T,
    pub temperature: T,
    pub seed: u64,
}

impl<T: Scalar> PretrainConfig<T> {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::invalid("extractor needs at least input and output widths"));
        }
        if self.layer_sizes[0] != input_dim {
            return Err(Error::invalid(format!(
                "extractor input width {} does not match data dimension {input_dim}",
                self.layer_sizes[0]
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.learning_rate > T::zero()) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be positive and finite"));
        }
        if !(self.weight_decay >= T::zero()) || !self.weight_decay.is_finite() {
            return Err(Error::invalid("weight decay must be nonnegative and finite"));
        }
        if !(self.temperature > T::zero()) || !self.temperature.is_finite() {
            return Err(Error::invalid("temperature must be positive and finite"));
        }
        Ok(())
    }
}

/// Pretraining result: the source model plus training diagnostics.
#[derive(Debug, Clone)]
pub struct PretrainOutcome<T> {
    pub model: Model<T>,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    /// False flags a failed run (final train accuracy below 90%).
    pub converged: bool,
}

/// Convergence floor for the flagged-failure status.
const CONVERGENCE_FLOOR: f64 = 0.9;

/// Cross-entropy of the cosine classifier; gradients for the raw feature
/// rows and the raw classifier rows, both through their normalizations.
fn cosine_ce<T: Scalar>(
    features: &Matrix<T>,
    weights: &Matrix<T>,
    labels: &[usize],
    temperature: T,
) -> Result<(f64, Matrix<T>, Matrix<T>)> {
    let (f_hat, f_norms) = features.normalized_rows()?;
    let (w_hat, w_norms) = weights.normalized_rows()?;
    let sims = f_hat.matmul_nt(&w_hat)?;
    let batch = features.rows();
    let classes = weights.rows();
    let inv_batch = T::one() / T::from(batch).unwrap();
    let mut loss = T::zero();
    let mut grad_logits = Matrix::zeros(batch, classes);
    for i in 0..batch {
        let probs = linalg::softmax(sims.row(i), temperature)?;
        let label = labels[i];
        if label >= classes {
            return Err(Error::invalid(format!("label {label} out of range for {classes} classes")));
        }
        loss -= probs[label].max(T::min_positive_value()).ln();
        for (c, (slot, &p)) in grad_logits.row_mut(i).iter_mut().zip(&probs).enumerate() {
            let indicator = if c == label { T::one() } else { T::zero() };
            *slot = (p - indicator) * inv_batch / temperature;
        }
    }
    let loss = (loss * inv_batch).to_f64().unwrap();
    let mut grad_features = grad_logits.matmul(&w_hat)?;
    for i in 0..batch {
        let radial: T = grad_logits
            .row(i)
            .iter()
            .zip(sims.row(i))
            .map(|(&g, &s)| g * s)
            .sum();
        for (slot, &f) in grad_features.row_mut(i).iter_mut().zip(f_hat.row(i)) {
            *slot = (*slot - radial * f) / f_norms[i];
        }
    }
    let mut grad_weights = grad_logits.matmul_tn(&f_hat)?;
    for c in 0..classes {
        let mut radial = T::zero();
        for i in 0..batch {
            radial += grad_logits.get(i, c) * sims.get(i, c);
        }
        for (slot, &w) in grad_weights.row_mut(c).iter_mut().zip(w_hat.row(c)) {
            *slot = (*slot - radial * w) / w_norms[c];
        }
    }
    Ok((loss, grad_features, grad_weights))
}

/// Trains the extractor and cosine classifier with cross-entropy, then
/// freezes the classifier rows (normalized) as prototypes with a uniform
/// prior. Zero epochs returns the seeded initialization.
pub fn pretrain_source<T: Scalar>(
    data: &LabeledDataset<T>,
    class_count: usize,
    config: &PretrainConfig<T>,
) -> Result<PretrainOutcome<T>> {
    config.validate(data.input_dim())?;
    if class_count < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    data.class_counts(class_count)?;
    let feature_dim = *config.layer_sizes.last().unwrap();
    let root = SeededRng::new(config.seed);
    let mut init_rng = root.derive(STREAM_EXTRACTOR_INIT);
    let mut extractor = MlpExtractor::<T>::seeded(&config.layer_sizes, &mut init_rng)?;
    let mut class_rng = root.derive(STREAM_CLASSIFIER_INIT);
    let scale = T::one() / T::from(feature_dim).unwrap().sqrt();
    let mut weights = Matrix::zeros(class_count, feature_dim);
    for c in 0..class_count {
        for slot in weights.row_mut(c) {
            *slot = class_rng.normal::<T>() * scale;
        }
    }
    let batch = config.batch_size.min(data.len());
    let per_epoch = data.len() / batch;
    let extractor_params = extractor.param_count();
    let total_params = extractor_params + class_count * feature_dim;
    let mut adam = crate::adam::AdamState::new(total_params, config.learning_rate, config.weight_decay)?;
    let mut order_rng = root.derive(STREAM_EPOCH_ORDER);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for b in 0..per_epoch {
            let idx = &order[b * batch..(b + 1) * batch];
            let x = data.inputs().gather_rows(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let (features, cache) = extractor.forward(&x)?;
            let (loss, grad_features, grad_weights) =
                cosine_ce(&features, &weights, &y, config.temperature)?;
            let net_grads = extractor.backward(&cache, &grad_features)?;
            let mut params = extractor.flatten_params();
            params.extend_from_slice(weights.data());
            let mut grads = net_grads.flatten();
            grads.extend_from_slice(grad_weights.data());
            adam.step(&mut params, &grads)?;
            extractor.assign_params(&params[..extractor_params])?;
            weights = Matrix::from_vec(class_count, feature_dim, params[extractor_params..].to_vec())?;
            epoch_loss += loss;
        }
        epoch_losses.push(epoch_loss / per_epoch as f64);
    }
    let protos = PrototypeSet::new(
        weights,
        vec![T::one() / T::from(class_count).unwrap(); class_count],
        config.temperature,
    )?;
    let model = Model::new(extractor, protos)?;
    let (_, predictions) = model.predict(data.inputs())?;
    let train_accuracy = metrics::accuracy(&predictions, data.labels())?;
    Ok(PretrainOutcome {
        model,
        epoch_losses,
        train_accuracy,
        converged: train_accuracy >= CONVERGENCE_FLOOR,
    })
}

/// Label-based evaluation summary; `null` entries mark undefined scores.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub per_class_dice: Vec<Option<f64>>,
    /// Mean Dice over classes present in the ground truth.
    pub macro_dice: Option<f64>,
    /// Mean cosine between each feature and its predicted prototype.
    pub compactness: f64,
    pub prediction_histogram: Vec<usize>,
    pub mean_entropy: f64,
}

/// Evaluates discrete predictions and feature geometry on labeled data.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &LabeledDataset<T>) -> Result<MetricsReport> {
    let classes = model.protos.class_count();
    data.class_counts(classes)?;
    let features = model.features(data.inputs())?;
    let (probs, predictions) = model.predict_from_features(&features)?;
    let accuracy = metrics::accuracy(&predictions, data.labels())?;
    let confusion = metrics::class_confusion(&predictions, data.labels(), classes)?;
    let per_class_recall: Vec<Option<f64>> = confusion
        .iter()
        .map(|c| (c.support > 0).then(|| c.true_positive as f64 / c.support as f64))
        .collect();
    let per_class_dice = metrics::label_dice(&predictions, data.labels(), classes)?;
    let present: Vec<f64> = confusion
        .iter()
        .zip(&per_class_dice)
        .filter(|(c, _)| c.support > 0)
        .filter_map(|(_, d)| *d)
        .collect();
    let macro_dice = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    let (f_hat, _) = features.normalized_rows()?;
    let sims = f_hat.matmul_nt(model.protos.weights())?;
    let mut compactness = 0.0;
    let mut mean_entropy = 0.0;
    for i in 0..sims.rows() {
        compactness += sims.get(i, predictions[i]).to_f64().unwrap();
        mean_entropy += linalg::entropy(probs.row(i))?.to_f64().unwrap();
    }
    compactness /= sims.rows() as f64;
    mean_entropy /= sims.rows() as f64;
    let mut prediction_histogram = vec![0usize; classes];
    for &p in &predictions {
        prediction_histogram[p] += 1;
    }
    Ok(MetricsReport {
        accuracy,
        per_class_recall,
        per_class_dice,
        macro_dice,
        compactness,
        prediction_histogram,
        mean_entropy,
    })
}

/// Mean of the defined per-class recalls.
pub fn macro_recall(report: &MetricsReport) -> Option<f64> {
    let defined: Vec<f64> = report.per_class_recall.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Mean cosine between reliable samples' live features and the prototype
/// of their snapshot pseudo-label. Reliability uses the entropy percentile
/// rule with a single alpha for every class.
pub fn reliable_prototype_cosine<T: Scalar>(
    live: &Model<T>,
    snapshot: &Model<T>,
    inputs: &Matrix<T>,
    alpha: f64,
) -> Result<f64> {
    let classes = snapshot.protos.class_count();
    let (probs, _) = snapshot.predict(inputs)?;
    let pred = PredictionBatch::from_probs(probs)?;
    let thresholds = class_thresholds(&pred, &vec![alpha; classes])?;
    let queries = select_queries(&pred, &thresholds);
    let features = live.features(inputs)?;
    let (f_hat, _) = features.normalized_rows()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (class, rows) in queries.iter().enumerate() {
        let proto = live.protos.prototype(class);
        for &row in rows {
            total += linalg::dot(f_hat.row(row), proto).to_f64().unwrap();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("no reliable samples in the batch".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::MlpExtractor;
    use approx::assert_relative_eq;

    fn toy_params() -> ScenarioParams<f64> {
        ScenarioParams {
            class_count: 3,
            input_dim: 5,
            class_std: 0.2,
            separation: 1.0,
            rotation_angle: 0.5,
            scale: 1.2,
            shift_norm: 0.7,
            source_proportions: vec![1.0 / 3.0; 3],
            target_proportions: vec![0.5, 0.3, 0.2],
            train_count: 60,
            eval_count: 30,
            seed: 7,
            geometry_seed: 11,
        }
    }

    #[test]
    fn remainder_counts_match_hand_cases() {
        let counts = largest_remainder_counts(&[0.85, 0.05, 0.05, 0.05], 2000).unwrap();
        assert_eq!(counts, vec![1700, 100, 100, 100]);
        let counts = largest_remainder_counts(&[0.5, 0.3, 0.2], 7).unwrap();
        assert_eq!(counts, vec![4, 2, 1]);
        let counts = largest_remainder_counts(&[0.5, 0.5], 3).unwrap();
        assert_eq!(counts, vec![2, 1]);
    }

    #[test]
    fn remainder_counts_reject_starved_class() {
        let err = largest_remainder_counts(&[0.999, 0.001], 10).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let inputs = Matrix::from_vec(
            2,
            3,
            vec![0.1, -2.5e-13, 3.0, f64::MIN_POSITIVE, 1.0 / 3.0, -7.25],
        )
        .unwrap();
        let data = LabeledDataset::new(inputs, vec![1, 0], Split::Eval).unwrap();
        let text = data.to_csv();
        assert!(text.starts_with("split,label,x0,x1,x2\n"));
        let back = LabeledDataset::<f64>::from_csv(&text).unwrap();
        assert_eq!(back.split(), Split::Eval);
        assert_eq!(back.labels(), data.labels());
        assert_eq!(back.inputs().data(), data.inputs().data());
    }

    #[test]
    fn csv_rejects_malformed_files() {
        assert!(LabeledDataset::<f64>::from_csv("").is_err());
        assert!(LabeledDataset::<f64>::from_csv("label,split,x0\n").is_err());
        assert!(LabeledDataset::<f64>::from_csv("split,label\n").is_err());
        assert!(LabeledDataset::<f64>::from_csv("split,label,x0\n").is_err());
        assert!(LabeledDataset::<f64>::from_csv("split,label,x0\ntrain,0,1.0,2.0\n").is_err());
        assert!(LabeledDataset::<f64>::from_csv("split,label,x0\ntrain,zero,1.0\n").is_err());
        assert!(LabeledDataset::<f64>::from_csv("split,label,x0\ntrain,0,nope\n").is_err());
        let mixed = "split,label,x0\ntrain,0,1.0\neval,1,2.0\n";
        assert!(LabeledDataset::<f64>::from_csv(mixed).is_err());
    }

    #[test]
    fn built_rotation_is_orthogonal_and_norm_preserving() {
        for geometry_seed in [1u64, 2, 3] {
            let mut params = toy_params();
            params.geometry_seed = geometry_seed;
            let spec = build_spec(&params).unwrap();
            let q = spec.transform().rotation();
            let gram = q.matmul_tn(q).unwrap();
            for r in 0..q.rows() {
                for c in 0..q.cols() {
                    let expected = if r == c { 1.0 } else { 0.0 };
                    assert!((gram.get(r, c) - expected).abs() < 1e-12);
                }
            }
            let x = Matrix::from_vec(1, 5, vec![0.3, -1.0, 2.0, 0.5, -0.25]).unwrap();
            let rotated = x.matmul_nt(q).unwrap();
            assert_relative_eq!(
                linalg::norm(rotated.row(0)),
                linalg::norm(x.row(0)),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn built_spec_means_have_exact_separation() {
        let spec = build_spec(&toy_params()).unwrap();
        for a in 0..3 {
            for b in (a + 1)..3 {
                let diff: Vec<f64> = spec
                    .class_means()
                    .row(a)
                    .iter()
                    .zip(spec.class_means().row(b))
                    .map(|(x, y)| x - y)
                    .collect();
                assert_relative_eq!(linalg::norm(&diff), 1.0, max_relative = 1e-12);
            }
        }
        let shift_norm = linalg::norm(spec.transform().shift());
        assert_relative_eq!(shift_norm, 0.7, max_relative = 1e-12);
    }

    #[test]
    fn build_spec_requires_room_for_axis_means() {
        let mut params = toy_params();
        params.input_dim = 2;
        assert!(build_spec(&params).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_counts_match() {
        let spec = build_spec(&toy_params()).unwrap();
        let (source_a, target_a) = generate_domains(&spec).unwrap();
        let (source_b, target_b) = generate_domains(&spec).unwrap();
        assert_eq!(source_a.train.to_csv(), source_b.train.to_csv());
        assert_eq!(source_a.eval.to_csv(), source_b.eval.to_csv());
        assert_eq!(target_a.train.to_csv(), target_b.train.to_csv());
        assert_eq!(target_a.eval.to_csv(), target_b.eval.to_csv());
        assert_eq!(source_a.train.class_counts(3).unwrap(), vec![20, 20, 20]);
        assert_eq!(target_a.train.class_counts(3).unwrap(), vec![30, 18, 12]);
        assert_eq!(target_a.eval.class_counts(3).unwrap(), vec![15, 9, 6]);
        assert_eq!(source_a.train.split(), Split::Train);
        assert_eq!(source_a.eval.split(), Split::Eval);
    }

    #[test]
    fn identity_transform_reproduces_the_source_family() {
        let mut params = toy_params();
        params.rotation_angle = 0.0;
        params.scale = 1.0;
        params.shift_norm = 0.0;
        params.train_count = 4000;
        params.target_proportions = params.source_proportions.clone();
        let spec = build_spec(&params).unwrap();
        let (_, target) = generate_domains(&spec).unwrap();
        let counts = target.train.class_counts(3).unwrap();
        let mut sums = vec![vec![0.0; 5]; 3];
        for (i, &label) in target.train.labels().iter().enumerate() {
            for (d, &v) in target.train.inputs().row(i).iter().enumerate() {
                sums[label][d] += v;
            }
        }
        for c in 0..3 {
            for d in 0..5 {
                let mean = sums[c][d] / counts[c] as f64;
                let tolerance = 5.0 * 0.2 / (counts[c] as f64).sqrt();
                assert!(
                    (mean - spec.class_means().get(c, d)).abs() < tolerance,
                    "class {c} dim {d} mean {mean} too far from spec"
                );
            }
        }
    }

    #[test]
    fn transform_moves_class_means_as_specified() {
        let spec = build_spec(&toy_params()).unwrap();
        let means = spec.class_means().clone();
        let mapped = spec.transform().apply(&means).unwrap();
        let (_, target) = generate_domains(&spec).unwrap();
        let counts = target.train.class_counts(3).unwrap();
        let mut sums = vec![vec![0.0; 5]; 3];
        for (i, &label) in target.train.labels().iter().enumerate() {
            for (d, &v) in target.train.inputs().row(i).iter().enumerate() {
                sums[label][d] += v;
            }
        }
        for c in 0..3 {
            for d in 0..5 {
                let mean = sums[c][d] / counts[c] as f64;
                let tolerance = 6.0 * 1.2 * 0.2 / (counts[c] as f64).sqrt();
                assert!((mean - mapped.get(c, d)).abs() < tolerance);
            }
        }
    }

    #[test]
    fn cosine_ce_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(42);
        let batch = 5;
        let classes = 3;
        let dim = 4;
        let features =
            Matrix::from_vec(batch, dim, (0..batch * dim).map(|_| rng.normal::<f64>()).collect())
                .unwrap();
        let weights =
            Matrix::from_vec(classes, dim, (0..classes * dim).map(|_| rng.normal::<f64>()).collect())
                .unwrap();
        let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
        let tau = 0.3;
        let (_, grad_f, grad_w) = cosine_ce(&features, &weights, &labels, tau).unwrap();
        let eps = 1e-6;
        for r in 0..batch {
            for c in 0..dim {
                let mut plus = features.clone();
                plus.set(r, c, plus.get(r, c) + eps);
                let mut minus = features.clone();
                minus.set(r, c, minus.get(r, c) - eps);
                let (lp, _, _) = cosine_ce(&plus, &weights, &labels, tau).unwrap();
                let (lm, _, _) = cosine_ce(&minus, &weights, &labels, tau).unwrap();
                let fd = (lp - lm) / (2.0 * eps);
                assert!((grad_f.get(r, c) - fd).abs() < 1e-6, "feature grad ({r},{c})");
            }
        }
        for r in 0..classes {
            for c in 0..dim {
                let mut plus = weights.clone();
                plus.set(r, c, plus.get(r, c) + eps);
                let mut minus = weights.clone();
                minus.set(r, c, minus.get(r, c) - eps);
                let (lp, _, _) = cosine_ce(&features, &plus, &labels, tau).unwrap();
                let (lm, _, _) = cosine_ce(&features, &minus, &labels, tau).unwrap();
                let fd = (lp - lm) / (2.0 * eps);
                assert!((grad_w.get(r, c) - fd).abs() < 1e-6, "weight grad ({r},{c})");
            }
        }
    }

    #[test]
    fn pretraining_separable_toy_reaches_full_accuracy() {
        let inputs = Matrix::from_vec(
            8,
            2,
            vec![
                5.0, 0.1, 5.2, -0.2, 4.8, 0.0, 5.1, 0.3, -5.0, 0.2, -5.1, -0.1, -4.9, 0.1, -5.2,
                0.0,
            ],
        )
        .unwrap();
        let labels = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let data = LabeledDataset::new(inputs, labels, Split::Train).unwrap();
        let config = PretrainConfig {
            layer_sizes: vec![2, 8, 4],
            epochs: 60,
            batch_size: 4,
            learning_rate: 5e-3,
            weight_decay: 0.0,
            temperature: 0.1,
            seed: 3,
        };
        let outcome = pretrain_source(&data, 2, &config).unwrap();
        assert_eq!(outcome.train_accuracy, 1.0);
        assert!(outcome.converged);
        assert_eq!(outcome.epoch_losses.len(), 60);
        assert!(outcome.epoch_losses[59] < outcome.epoch_losses[0]);
    }

    #[test]
    fn zero_epochs_returns_the_seeded_initialization() {
        let spec = build_spec(&toy_params()).unwrap();
        let (source, _) = generate_domains(&spec).unwrap();
        let config = PretrainConfig {
            layer_sizes: vec![5, 6, 4],
            epochs: 0,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            temperature: 0.1,
            seed: 9,
        };
        let a = pretrain_source(&source.train, 3, &config).unwrap();
        let b = pretrain_source(&source.train, 3, &config).unwrap();
        assert!(a.epoch_losses.is_empty());
        assert_eq!(a.model.extractor.flatten_params(), b.model.extractor.flatten_params());
        assert_eq!(a.model.protos.weights().data(), b.model.protos.weights().data());
        let root = SeededRng::new(9);
        let mut init = root.derive(STREAM_EXTRACTOR_INIT);
        let fresh = MlpExtractor::<f64>::seeded(&[5, 6, 4], &mut init).unwrap();
        assert_eq!(a.model.extractor.flatten_params(), fresh.flatten_params());
    }

    /// Classifier that sends input axis c to class c through an identity
    /// extractor, so predictions are exact on axis-aligned data.
    fn axis_model(classes: usize, dim: usize) -> Model<f64> {
        let mut eye = Matrix::zeros(dim, dim);
        for d in 0..dim {
            eye.set(d, d, 1.0);
        }
        let extractor = MlpExtractor::from_parts(vec![eye], vec![vec![0.0; dim]]).unwrap();
        let mut weights = Matrix::zeros(classes, dim);
        for c in 0..classes {
            weights.set(c, c, 1.0);
        }
        let protos =
            PrototypeSet::new(weights, vec![1.0 / classes as f64; classes], 0.1).unwrap();
        Model::new(extractor, protos).unwrap()
    }

    #[test]
    fn perfect_predictions_score_perfectly() {
        let model = axis_model(3, 3);
        let inputs = Matrix::from_vec(
            6,
            3,
            vec![
                1.0, 0.0, 0.0, 0.9, 0.1, 0.0, 0.0, 1.0, 0.0, 0.1, 0.9, 0.0, 0.0, 0.0, 1.0, 0.0,
                0.1, 0.9,
            ],
        )
        .unwrap();
        let labels = vec![0, 0, 1, 1, 2, 2];
        let data = LabeledDataset::new(inputs, labels, Split::Eval).unwrap();
        let report = evaluate(&model, &data).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_dice, Some(1.0));
        assert_eq!(report.per_class_dice, vec![Some(1.0); 3]);
        assert_eq!(report.per_class_recall, vec![Some(1.0); 3]);
        assert_eq!(report.prediction_histogram, vec![2, 2, 2]);
        assert!(report.compactness > 0.85);
    }

    #[test]
    fn constant_predictor_matches_closed_form_scores() {
        let dim = 4;
        let classes = 4;
        let mut weights = Matrix::zeros(classes, dim);
        for c in 0..classes {
            weights.set(c, c, 1.0);
        }
        let protos =
            PrototypeSet::new(weights, vec![0.25; classes], 0.1).unwrap();
        let zero = Matrix::zeros(dim, dim);
        let extractor =
            MlpExtractor::from_parts(vec![zero], vec![vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let model = Model::new(extractor, protos).unwrap();
        let inputs = Matrix::from_vec(8, 4, vec![0.3; 32]).unwrap();
        let labels = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let data = LabeledDataset::new(inputs, labels, Split::Eval).unwrap();
        let report = evaluate(&model, &data).unwrap();
        assert_relative_eq!(report.accuracy, 0.25);
        assert_relative_eq!(report.per_class_dice[0].unwrap(), 0.4);
        for c in 1..4 {
            assert_eq!(report.per_class_dice[c], Some(0.0));
        }
        assert_relative_eq!(report.macro_dice.unwrap(), 0.1);
        assert_eq!(report.prediction_histogram, vec![8, 0, 0, 0]);
        assert_eq!(report.per_class_recall, vec![Some(1.0), Some(0.0), Some(0.0), Some(0.0)]);
    }

    #[test]
    fn class_absent_from_both_reports_null_dice() {
        let model = axis_model(3, 3);
        let inputs =
            Matrix::from_vec(4, 3, vec![1.0, 0.0, 0.0, 0.9, 0.1, 0.0, 0.1, 0.9, 0.0, 0.0, 1.0, 0.0])
                .unwrap();
        let labels = vec![0, 0, 1, 1];
        let data = LabeledDataset::new(inputs, labels, Split::Eval).unwrap();
        let report = evaluate(&model, &data).unwrap();
        assert_eq!(report.per_class_dice[2], None);
        assert_eq!(report.per_class_recall[2], None);
        assert_eq!(report.macro_dice, Some(1.0));
    }

    #[test]
    fn compactness_is_one_for_features_on_prototypes() {
        let model = axis_model(3, 3);
        let inputs =
            Matrix::from_vec(3, 3, vec![2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.5]).unwrap();
        let data = LabeledDataset::new(inputs, vec![0, 1, 2], Split::Eval).unwrap();
        let report = evaluate(&model, &data).unwrap();
        assert_relative_eq!(report.compactness, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn reliable_cosine_counts_only_low_entropy_samples() {
        let model = axis_model(2, 2);
        let inputs = Matrix::from_vec(
            4,
            2,
            vec![1.0, 0.0, 0.8, 0.6, 0.0, 1.0, 0.6, 0.8],
        )
        .unwrap();
        let value = reliable_prototype_cosine(&model, &model, &inputs, 50.0).unwrap();
        assert_relative_eq!(value, 1.0, max_relative = 1e-12);
        let all = reliable_prototype_cosine(&model, &model, &inputs, 100.0).unwrap();
        assert!(all < 1.0 - 1e-6);
    }


    #[test]
    fn shipped_scenario_has_a_real_domain_gap() {
        // The default four-class geometry with the shipped geometry seed:
        // the source model must master its own domain yet lose real
        // accuracy on the shifted one, or adaptation has nothing to show.
        let params = ScenarioParams {
            class_count: 4,
            input_dim: 8,
            class_std: 0.3,
            separation: 1.2,
            rotation_angle: 0.5235987755982988,
            scale: 1.3,
            shift_norm: 1.0,
            source_proportions: vec![0.25; 4],
            target_proportions: vec![0.25; 4],
            train_count: 2000,
            eval_count: 1000,
            seed: 1,
            geometry_seed: 29,
        };
        let spec = build_spec(&params).unwrap();
        let (source, target) = generate_domains(&spec).unwrap();
        let pretrain = PretrainConfig {
            layer_sizes: vec![8, 64, 64, 16],
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            temperature: 0.1,
            seed: 33,
        };
        let outcome = pretrain_source(&source.train, 4, &pretrain).unwrap();
        assert!(outcome.converged);
        assert!(outcome.train_accuracy >= 0.99, "train accuracy {}", outcome.train_accuracy);
        let shifted = evaluate(&outcome.model, &target.eval).unwrap();
        assert!(shifted.accuracy <= 0.85, "shifted accuracy {}", shifted.accuracy);
    }
}
