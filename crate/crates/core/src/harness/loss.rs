use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub fn one_hot<T: Real>(labels: &[u8], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(shape_err("one_hot", format!("label {l} with {classes} classes")));
        }
        t.data_mut()[i * classes + l as usize] = T::one();
    }
    Ok(t)
}

/// `(1 − s)·y + s/C` row by row.
pub fn smooth_targets<T: Real>(targets: &Tensor<T>, smoothing: f64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!(
            "label smoothing must be in [0, 1), got {smoothing}"
        )));
    }
    let c = match *targets.shape() {
        [_, c] if c > 0 => c,
        ref s => return Err(shape_err("smooth_targets", format!("expected [B, C], got {s:?}"))),
    };
    let keep = T::lit(1.0 - smoothing);
    let spread = T::lit(smoothing / c as f64);
    Ok(targets.map(|y| keep * y + spread))
}

/// Softmax cross-entropy against label-smoothed hard or soft targets, averaged over the batch.
pub fn label_smoothed_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &Tensor<T>,
    smoothing: f64,
) -> Result<Var> {
    let t = smooth_targets(targets, smoothing)?;
    tape.softmax_cross_entropy(logits, &t)
}

/// Fraction of rows whose arg-max matches the label; ties go to the lower index.
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<f64> {
    let c = match *logits.shape() {
        [b, c] if b == labels.len() && c > 0 => c,
        ref s => {
            return Err(shape_err(
                "accuracy",
                format!("logits {s:?} for {} labels", labels.len()),
            ))
        }
    };
    if labels.is_empty() {
        return Ok(0.0);
    }
    let correct = logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |bi, (i, &v)| if v > row[bi] { i } else { bi });
            best == l as usize
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}
