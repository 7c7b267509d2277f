use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimMode {
    Lamb,
    AdamW,
}

impl fmt::Display for OptimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimMode::Lamb => "lamb",
            OptimMode::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lamb" => Ok(OptimMode::Lamb),
            "adamw" => Ok(OptimMode::AdamW),
            other => Err(format!("unknown optimizer {other:?}, expected lamb or adamw")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub trust_clip: (f64, f64),
    pub mode: OptimMode,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            trust_clip: (0.01, 10.0),
            mode: OptimMode::Lamb,
        }
    }
}

/// Adam moments for every tensor of a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub hp: OptimConfig,
}

impl OptimState {
    pub fn new(params: &ParamStore, hp: OptimConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            hp,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One optimizer step with the gradients stored on the parameters.
///
/// Per tensor, `u = m_hat / (sqrt(v_hat) + eps) + wd * w` (decay only on
/// tensors flagged for it) and `w -= lr * r * u`, where `r` is the clamped
/// trust ratio `|w| / |u|` in lamb mode and 1 in adamw mode.
pub fn lamb_step(params: &mut ParamStore, state: &mut OptimState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state holds {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        let n = p.tensor.numel();
        if state.m[i].len() != n || state.v[i].len() != n {
            return Err(Error::Contract(format!("moment shape mismatch for {}", p.name)));
        }
        match &p.tensor.grad {
            Some(g) if g.len() == n => {}
            Some(g) => {
                return Err(Error::Contract(format!(
                    "gradient of {} has {} values, expected {n}",
                    p.name,
                    g.len()
                )))
            }
            None => return Err(Error::Contract(format!("no gradient for {}", p.name))),
        }
    }

    state.step += 1;
    let hp = state.hp;
    let t = state.step as f64;
    let c1 = 1.0 - hp.beta1.powf(t);
    let c2 = 1.0 - hp.beta2.powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = p.tensor.grad.as_deref().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut dir = vec![0.0; g.len()];
        for j in 0..g.len() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            dir[j] = (m[j] / c1) / ((v[j] / c2).sqrt() + hp.eps);
        }
        let wd = if p.decay { hp.weight_decay } else { 0.0 };
        let w = p.tensor.data_mut();
        let ratio = match hp.mode {
            OptimMode::AdamW => 1.0,
            OptimMode::Lamb => {
                let u: Vec<f64> = dir.iter().zip(w.iter()).map(|(d, w)| d + wd * w).collect();
                let (wn, un) = (norm(w), norm(&u));
                if wn == 0.0 || un == 0.0 {
                    1.0
                } else {
                    (wn / un).clamp(hp.trust_clip.0, hp.trust_clip.1)
                }
            }
        };
        let step = lr * ratio;
        let shrink = 1.0 - step * wd;
        for (w, d) in w.iter_mut().zip(&dir) {
            *w = *w * shrink - step * d;
        }
    }
    Ok(())
}
