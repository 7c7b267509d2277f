//! Optimizer, schedule, loss and the training loop.

pub mod fit;
pub mod loss;
pub mod optim;
pub mod plan;
pub mod schedule;
pub mod sweep;

pub use fit::{evaluate, finetune_resolution, fit, EpochLog, Outputs, TrainLog};
pub use loss::{argmax_rows, label_smoothing_ce, smoothed_targets};
pub use optim::{lamb_step, OptimConfig, OptimMode, OptimState};
pub use plan::{PlanMode, TrainPlan};
pub use schedule::half_cosine_lr;
pub use sweep::{sweep, CellStatus, SweepGrid, SweepReport, SweepRow};
