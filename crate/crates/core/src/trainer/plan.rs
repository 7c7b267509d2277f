use std::fmt;
use std::str::FromStr;

use super::optim::{OptimConfig, OptimMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanMode {
    Scratch,
    Finetune,
}

impl fmt::Display for PlanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlanMode::Scratch => "scratch",
            PlanMode::Finetune => "finetune",
        })
    }
}

impl FromStr for PlanMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "scratch" => Ok(PlanMode::Scratch),
            "finetune" => Ok(PlanMode::Finetune),
            other => Err(format!("unknown plan mode {other:?}, expected scratch or finetune")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub drop_path: f64,
    pub label_smoothing: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_frac: f64,
    pub seed: u64,
    pub mode: PlanMode,
    pub optimizer: OptimMode,
    pub beta1: f64,
    pub beta2: f64,
    pub opt_eps: f64,
    pub trust_clip: (f64, f64),
    /// Random flip and padded crop on training batches.
    pub augment: bool,
}

impl Default for TrainPlan {
    fn default() -> Self {
        let o = OptimConfig::default();
        Self {
            epochs: 30,
            batch_size: 64,
            base_lr: o.base_lr,
            min_lr: 1e-6,
            weight_decay: o.weight_decay,
            drop_path: 0.0,
            label_smoothing: 0.1,
            warmup_frac: 0.05,
            seed: 0,
            mode: PlanMode::Scratch,
            optimizer: o.mode,
            beta1: o.beta1,
            beta2: o.beta2,
            opt_eps: o.eps,
            trust_clip: o.trust_clip,
            augment: true,
        }
    }
}

impl TrainPlan {
    /// Recipe for the desk presets: the paper schedule with smaller
    /// batches and a higher rate, so 30 epochs of a few hundred images give
    /// enough optimizer steps.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            base_lr: 1e-2,
            ..Self::default()
        }
    }

    /// Defaults for the given mode. Fine-tuning uses a lower constant-ish
    /// rate, no warmup and a third of the epochs.
    pub fn for_mode(mode: PlanMode) -> Self {
        match mode {
            PlanMode::Scratch => Self::default(),
            PlanMode::Finetune => {
                let d = Self::default();
                Self {
                    epochs: d.epochs / 3,
                    base_lr: 1e-4,
                    min_lr: 1e-4,
                    warmup_frac: 0.0,
                    mode,
                    ..d
                }
            }
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            base_lr: self.base_lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.opt_eps,
            trust_clip: self.trust_clip,
            mode: self.optimizer,
        }
    }
}
