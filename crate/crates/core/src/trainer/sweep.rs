use std::fmt::Write as _;

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig};

use super::fit::fit;
use super::plan::TrainPlan;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub drop_path: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Ok,
    /// Diverged during this epoch.
    Failed(usize),
}

impl std::fmt::Display for CellStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CellStatus::Ok => f.write_str("ok"),
            CellStatus::Failed(e) => write!(f, "failed@{e}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lr: f64,
    pub weight_decay: f64,
    pub drop_path: f64,
    /// Final-epoch validation accuracy (0 for failed cells).
    pub val_acc: f64,
    pub status: CellStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lr,weight_decay,drop_path,val_acc,status\n");
        for r in &self.rows {
            let _ = writeln!(s, "{:e},{},{},{:.6},{}", r.lr, r.weight_decay, r.drop_path, r.val_acc, r.status);
        }
        s
    }
}

/// Trains one fresh model (same init seed) per grid cell. Diverged cells
/// are recorded and the sweep continues. Rows are sorted by accuracy,
/// failed cells last.
pub fn sweep(
    grid: &SweepGrid,
    base: &TrainPlan,
    config: &ModelConfig,
    model_seed: u64,
    train: &Dataset,
    val: &Dataset,
) -> Result<SweepReport> {
    if grid.lr.is_empty() || grid.weight_decay.is_empty() || grid.drop_path.is_empty() {
        return Err(Error::Config("sweep grid needs at least one value per axis".into()));
    }
    let mut rows = Vec::new();
    for &lr in &grid.lr {
        for &wd in &grid.weight_decay {
            for &dp in &grid.drop_path {
                let plan = TrainPlan {
                    base_lr: lr,
                    weight_decay: wd,
                    drop_path: dp,
                    ..base.clone()
                };
                let mut model = build_model(config, model_seed)?;
                let (val_acc, status) = match fit(&mut model, train, val, &plan, None) {
                    Ok(log) => (log.last().map_or(0.0, |e| e.val_acc), CellStatus::Ok),
                    Err(Error::Divergence { epoch, .. }) => (0.0, CellStatus::Failed(epoch)),
                    Err(e) => return Err(e),
                };
                rows.push(SweepRow {
                    lr,
                    weight_decay: wd,
                    drop_path: dp,
                    val_acc,
                    status,
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        let failed = |r: &SweepRow| r.status != CellStatus::Ok;
        failed(a)
            .cmp(&failed(b))
            .then(b.val_acc.total_cmp(&a.val_acc))
    });
    Ok(SweepReport { rows })
}
