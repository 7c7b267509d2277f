use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Row-major `[B, k]` targets `(1 - eps) * onehot + eps / k`.
pub fn smoothed_targets(labels: &[usize], k: usize, eps: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} outside [0, 1)")));
    }
    let mut out = vec![eps / k as f64; labels.len() * k];
    for (b, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Data(format!("label {y} out of range for {k} classes")));
        }
        out[b * k + y] += 1.0 - eps;
    }
    Ok(out)
}

/// Mean label-smoothed cross-entropy of `logits [B, k]`.
pub fn label_smoothing_ce(logits: &Tensor, labels: &[usize], eps: f64) -> Result<f64> {
    let &[batch, k] = logits.shape() else {
        return Err(Error::dim("label_smoothing_ce", format!("logits {:?}", logits.shape())));
    };
    if labels.len() != batch {
        return Err(Error::dim("label_smoothing_ce", format!("{} labels for batch {batch}", labels.len())));
    }
    let target = smoothed_targets(labels, k, eps)?;
    let mut loss = 0.0;
    for (row, t) in logits.data().chunks(k).zip(target.chunks(k)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss -= row.iter().zip(t).map(|(l, t)| t * (l - lse)).sum::<f64>();
    }
    Ok(loss / batch as f64)
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap();
    logits
        .data()
        .chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
