use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Predictions are clamped into `[EPS, 1 - EPS]` before taking logarithms.
pub const EPS: f64 = 1e-7;

fn check_label(label: f64) -> Result<()> {
    if label == 0.0 || label == 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidLabel(label))
    }
}

/// Binary cross-entropy `-(y ln p + (1 - y) ln(1 - p))` of one prediction.
pub fn cross_entropy(prediction: f64, label: f64) -> Result<f64> {
    check_label(label)?;
    let p = prediction.clamp(EPS, 1.0 - EPS);
    Ok(-(label * p.ln() + (1.0 - label) * (1.0 - p).ln()))
}

/// Mean binary cross-entropy of an `m x 1` prediction column, as a graph node.
pub fn bce_mean(g: &mut Graph, predictions: Var, labels: &[f64]) -> Result<Var> {
    let (m, c) = g.shape(predictions);
    if c != 1 || m != labels.len() {
        return Err(Error::Shape(format!(
            "predictions {m}x{c} vs {} labels",
            labels.len()
        )));
    }
    if m == 0 {
        return Err(Error::Data("loss over an empty batch".into()));
    }
    for &y in labels {
        check_label(y)?;
    }
    let pos = g.constant(Tensor::from_vec(m, 1, labels.to_vec())?);
    let neg = g.constant(Tensor::from_vec(m, 1, labels.iter().map(|y| 1.0 - y).collect())?);
    let p = g.clamp(predictions, EPS, 1.0 - EPS);
    let log_p = g.log(p);
    let flipped = g.scale(p, -1.0);
    let one_minus = g.add_scalar(flipped, 1.0);
    let log_q = g.log(one_minus);
    let a = g.mul(log_p, pos);
    let b = g.mul(log_q, neg);
    let terms = g.add(a, b);
    let total = g.sum(terms);
    Ok(g.scale(total, -1.0 / m as f64))
}
