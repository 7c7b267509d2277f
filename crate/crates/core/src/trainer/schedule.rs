use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup from 0 to `base_lr`, then a half cosine down to `min_lr`
/// at `total_steps`.
pub fn half_cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64, warmup_steps: usize) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Contract(format!("step {step} beyond total {total_steps}")));
    }
    if warmup_steps > 0 && warmup_steps >= total_steps {
        return Err(Error::Contract(format!(
            "warmup of {warmup_steps} steps leaves nothing of {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    if total_steps == warmup_steps {
        return Ok(base_lr);
    }
    let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * t).cos()))
}
