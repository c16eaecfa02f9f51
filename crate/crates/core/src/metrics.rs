//! Segmentation-style evaluation metrics: overlap scores on binary masks
//! and label arrays, and symmetric boundary distances on 2-d masks.

use crate::error::{Error, Result};

/// Binary 2-d mask stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "mask data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Mask { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mask { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Dice overlap of two masks: `2|A ∩ B| / (|A| + |B|)`. Two empty masks
/// are a perfect match (1.0).
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::invalid("mask shapes differ"));
    }
    let intersection = a.data.iter().zip(&b.data).filter(|(&x, &y)| x && y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * intersection as f64 / total as f64)
}

/// Foreground pixels with at least one background 4-neighbor; positions
/// outside the array count as background, so edge pixels are boundary.
pub fn boundary(mask: &Mask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..mask.rows() {
        for c in 0..mask.cols() {
            if !mask.get(r, c) {
                continue;
            }
            let exposed = r == 0
                || r + 1 == mask.rows()
                || c == 0
                || c + 1 == mask.cols()
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if exposed {
                out.push((r, c));
            }
        }
    }
    out
}

fn directed_mean(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let mut total = 0.0;
    for &(r, c) in from {
        let mut best = f64::INFINITY;
        for &(r2, c2) in to {
            let dr = r as f64 - r2 as f64;
            let dc = c as f64 - c2 as f64;
            let d = (dr * dr + dc * dc).sqrt();
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    total / from.len() as f64
}

/// Average symmetric surface distance between mask boundaries: the mean of
/// the two directed average nearest-neighbor distances. Undefined when
/// either mask has no foreground.
pub fn assd(a: &Mask, b: &Mask) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::invalid("mask shapes differ"));
    }
    let ba = boundary(a);
    let bb = boundary(b);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::UndefinedMetric("surface distance with an empty mask".into()));
    }
    Ok((directed_mean(&ba, &bb) + directed_mean(&bb, &ba)) / 2.0)
}

/// Per-class confusion counts for label arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassCounts {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    /// Occurrences of the class in the truth array.
    pub support: usize,
}

/// Confusion counts per class. Labels must be below `classes`.
pub fn class_confusion(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<ClassCounts>> {
    if pred.len() != truth.len() {
        return Err(Error::invalid("prediction and truth lengths differ"));
    }
    if pred.is_empty() {
        return Err(Error::invalid("empty label arrays"));
    }
    if pred.iter().chain(truth).any(|&l| l >= classes) {
        return Err(Error::invalid(format!("label out of range for {classes} classes")));
    }
    let mut counts =
        vec![ClassCounts { true_positive: 0, false_positive: 0, false_negative: 0, support: 0 }; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[t].support += 1;
        if p == t {
            counts[t].true_positive += 1;
        } else {
            counts[p].false_positive += 1;
            counts[t].false_negative += 1;
        }
    }
    Ok(counts)
}

/// Fraction of positions where the labels agree.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::invalid("prediction and truth lengths differ"));
    }
    if pred.is_empty() {
        return Err(Error::invalid("empty label arrays"));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Per-class Dice on label arrays: `2 TP / (2 TP + FP + FN)`. A class
/// absent from both arrays has no defined score and yields `None`.
pub fn label_dice(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Option<f64>>> {
    let counts = class_confusion(pred, truth, classes)?;
    Ok(counts
        .iter()
        .map(|c| {
            let denom = 2 * c.true_positive + c.false_positive + c.false_negative;
            if denom == 0 {
                None
            } else {
                Some(2.0 * c.true_positive as f64 / denom as f64)
            }
        })
        .collect())
}

/// Mean of the defined per-class Dice scores. Undefined when no class has
/// a defined score.
pub fn macro_dice(per_class: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no class has a defined overlap score".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}
