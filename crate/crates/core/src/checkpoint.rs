//! Plain-text model checkpoints.
//!
//! Layout, all values space-separated on single lines:
//!
//! ```text
//! protoalign-ckpt v1
//! layers <size_0> <size_1> ... <size_L>
//! extractor.w1 <rows> <cols> <values...>
//! extractor.b1 1 <len> <values...>
//! ...
//! classifier.weights <classes> <feature_dim> <values...>
//! classifier.prior 1 <classes> <values...>
//! ```
//!
//! Values are written with 17 significant digits, so an `f64` round-trips
//! through the file without loss. The softmax temperature is not stored;
//! the loader takes it as an argument. Saving is deterministic: the same
//! model always produces the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::engine::Model;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::MlpExtractor;
use crate::prototypes::PrototypeSet;
use crate::scalar::Scalar;

const HEADER: &str = "protoalign-ckpt v1";

pub(crate) fn format_value<T: Scalar>(v: T) -> String {
    format!("{:.16e}", v.to_f64().unwrap())
}

fn push_tensor<T: Scalar>(out: &mut String, name: &str, rows: usize, cols: usize, values: &[T]) {
    let _ = write!(out, "{name} {rows} {cols}");
    for &v in values {
        let _ = write!(out, " {}", format_value(v));
    }
    out.push('\n');
}

/// Serializes a model to the checkpoint text format.
pub fn encode<T: Scalar>(model: &Model<T>) -> Result<String> {
    for layer in 0..model.extractor.layer_count() {
        model.extractor.weight(layer).ensure_finite("extractor weights")?;
    }
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    out.push_str("layers");
    for size in model.extractor.layer_sizes() {
        let _ = write!(out, " {size}");
    }
    out.push('\n');
    for layer in 0..model.extractor.layer_count() {
        let w = model.extractor.weight(layer);
        push_tensor(&mut out, &format!("extractor.w{}", layer + 1), w.rows(), w.cols(), w.data());
        let b = model.extractor.bias(layer);
        push_tensor(&mut out, &format!("extractor.b{}", layer + 1), 1, b.len(), b);
    }
    let protos = &model.protos;
    push_tensor(
        &mut out,
        "classifier.weights",
        protos.class_count(),
        protos.feature_dim(),
        protos.weights().data(),
    );
    push_tensor(&mut out, "classifier.prior", 1, protos.class_count(), protos.prior());
    Ok(out)
}

/// Parses a checkpoint, attaching the given softmax temperature.
pub fn decode<T: Scalar>(text: &str, temperature: T) -> Result<Model<T>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(line) if line.trim_end() == HEADER => {}
        Some(line) => {
            return Err(Error::format(format!("unrecognized header {line:?}, expected {HEADER:?}")))
        }
        None => return Err(Error::format("empty checkpoint")),
    }

    let layers_line = lines.next().ok_or_else(|| Error::format("missing layers line"))?;
    let mut tokens = layers_line.split_whitespace();
    if tokens.next() != Some("layers") {
        return Err(Error::format("second line must start with 'layers'"));
    }
    let layer_sizes: Vec<usize> = tokens
        .map(|t| t.parse::<usize>().map_err(|_| Error::format(format!("bad layer size {t:?}"))))
        .collect::<Result<_>>()?;
    if layer_sizes.len() < 2 {
        return Err(Error::format("layers line needs at least two sizes"));
    }

    let mut tensors: BTreeMap<String, Matrix<T>> = BTreeMap::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let name = tokens.next().ok_or_else(|| Error::format("empty tensor line"))?;
        let rows: usize = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format(format!("tensor {name}: bad row count")))?;
        let cols: usize = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format(format!("tensor {name}: bad column count")))?;
        let mut values = Vec::with_capacity(rows * cols);
        for token in tokens {
            let v: f64 = token
                .parse()
                .map_err(|_| Error::format(format!("tensor {name}: bad value {token:?}")))?;
            values.push(T::from(v).ok_or_else(|| Error::format("value out of range"))?);
        }
        if values.len() != rows * cols {
            return Err(Error::format(format!(
                "tensor {name}: expected {} values, found {}",
                rows * cols,
                values.len()
            )));
        }
        let matrix = Matrix::from_vec(rows, cols, values)
            .map_err(|e| Error::format(format!("tensor {name}: {e}")))?;
        if tensors.insert(name.to_string(), matrix).is_some() {
            return Err(Error::format(format!("duplicate tensor {name}")));
        }
    }

    fn take<T: Scalar>(
        tensors: &mut BTreeMap<String, Matrix<T>>,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> Result<Matrix<T>> {
        let tensor =
            tensors.remove(name).ok_or_else(|| Error::format(format!("missing tensor {name}")))?;
        if tensor.rows() != rows || tensor.cols() != cols {
            return Err(Error::format(format!(
                "tensor {name}: expected shape {rows}x{cols}, found {}x{}",
                tensor.rows(),
                tensor.cols()
            )));
        }
        Ok(tensor)
    }

    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (layer, window) in layer_sizes.windows(2).enumerate() {
        weights.push(take(&mut tensors, &format!("extractor.w{}", layer + 1), window[1], window[0])?);
        let bias = take(&mut tensors, &format!("extractor.b{}", layer + 1), 1, window[1])?;
        biases.push(bias.data().to_vec());
    }
    let feature_dim = *layer_sizes.last().unwrap();
    let class_weights = {
        let tensor = tensors
            .remove("classifier.weights")
            .ok_or_else(|| Error::format("missing tensor classifier.weights"))?;
        if tensor.cols() != feature_dim {
            return Err(Error::format(format!(
                "classifier.weights: expected {feature_dim} columns, found {}",
                tensor.cols()
            )));
        }
        tensor
    };
    let prior =
        take(&mut tensors, "classifier.prior", 1, class_weights.rows())?.data().to_vec();
    if let Some(name) = tensors.keys().next() {
        return Err(Error::format(format!("unexpected tensor {name}")));
    }

    let extractor = MlpExtractor::from_parts(weights, biases)
        .map_err(|e| Error::format(format!("extractor: {e}")))?;
    let protos = PrototypeSet::new(class_weights, prior, temperature)
        .map_err(|e| Error::format(format!("classifier: {e}")))?;
    Model::new(extractor, protos)
}

/// Writes a checkpoint file.
pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let text = encode(model)?;
    fs::write(path, text)?;
    Ok(())
}

/// Reads a checkpoint file, attaching the given softmax temperature.
pub fn load<T: Scalar>(path: &Path, temperature: T) -> Result<Model<T>> {
    let text = fs::read_to_string(path)?;
    decode(&text, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn sample_model(seed: u64) -> Model<f64> {
        let mut rng = SeededRng::new(seed);
        let extractor = MlpExtractor::seeded(&[4, 6, 3], &mut rng).unwrap();
        let weights =
            Matrix::from_vec(3, 3, (0..9).map(|_| rng.normal::<f64>()).collect()).unwrap();
        let protos = PrototypeSet::new(weights, vec![0.2, 0.5, 0.3], 0.1).unwrap();
        Model::new(extractor, protos).unwrap()
    }

    #[test]
    fn roundtrip_preserves_parameters() {
        let model = sample_model(1);
        let text = encode(&model).unwrap();
        let loaded: Model<f64> = decode(&text, 0.1).unwrap();
        assert_eq!(model.extractor.flatten_params(), loaded.extractor.flatten_params());
        for (a, b) in model.protos.prior().iter().zip(loaded.protos.prior()) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in model.protos.weights().data().iter().zip(loaded.protos.weights().data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(loaded.protos.temperature(), 0.1);
    }

    #[test]
    fn encoding_is_deterministic() {
        let model = sample_model(2);
        assert_eq!(encode(&model).unwrap(), encode(&model).unwrap());
    }

    #[test]
    fn save_load_roundtrip_on_disk() {
        let dir = std::env::temp_dir().join("protoalign-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let model = sample_model(3);
        save(&model, &path).unwrap();
        let loaded: Model<f64> = load(&path, 0.1).unwrap();
        assert_eq!(model.extractor.flatten_params(), loaded.extractor.flatten_params());
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn rejects_malformed_inputs() {
        let model = sample_model(4);
        let good = encode(&model).unwrap();

        assert!(matches!(decode::<f64>("", 0.1), Err(Error::Format(_))));
        assert!(matches!(
            decode::<f64>(&good.replace(HEADER, "other-format v9"), 0.1),
            Err(Error::Format(_))
        ));

        // Truncate: drop the last line (the prior).
        let truncated: Vec<&str> = good.lines().collect();
        let missing = truncated[..truncated.len() - 1].join("\n");
        assert!(matches!(decode::<f64>(&missing, 0.1), Err(Error::Format(_))));

        // Corrupt a value count.
        let corrupted = good.replace("classifier.prior 1 3", "classifier.prior 1 4");
        assert!(matches!(decode::<f64>(&corrupted, 0.1), Err(Error::Format(_))));

        // Duplicate tensor line.
        let prior_line = good.lines().last().unwrap().to_string();
        let duplicated = format!("{good}{prior_line}\n");
        assert!(matches!(decode::<f64>(&duplicated, 0.1), Err(Error::Format(_))));

        // Unknown extra tensor.
        let extra = format!("{good}mystery.tensor 1 1 0.0e0\n");
        assert!(matches!(decode::<f64>(&extra, 0.1), Err(Error::Format(_))));

        // Bad temperature surfaces as an error too.
        assert!(decode::<f64>(&good, 0.0).is_err());
    }

    #[test]
    fn formatted_values_roundtrip_exactly() {
        let mut rng = SeededRng::new(5);
        for _ in 0..1000 {
            let v: f64 = rng.normal::<f64>() * 1e3;
            let parsed: f64 = format_value(v).parse().unwrap();
            assert_eq!(v.to_bits(), parsed.to_bits());
        }
        for v in [0.1, 1.0 / 3.0, f64::MIN_POSITIVE, 1e300, -2.5e-300, 0.0] {
            let parsed: f64 = format_value(v).parse().unwrap();
            assert_eq!(v.to_bits(), parsed.to_bits());
        }
    }
}
