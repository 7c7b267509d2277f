use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataio::{augment, Dataset};
use crate::error::{Error, Result};
use crate::model::{checkpoint, check_resolution, Mode, PatchConvNet, Stochastic};
use crate::numerics::{Tape, Tensor};

use super::loss::{argmax_rows, label_smoothing_ce, smoothed_targets};
use super::optim::{lamb_step, OptimState};
use super::plan::TrainPlan;
use super::schedule::half_cosine_lr;

/// Divergence: loss above this multiple of the first batch loss ...
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// ... for this many consecutive epochs.
pub const DIVERGENCE_EPOCHS: usize = 3;

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    /// Eval-mode accuracy on the (unaugmented) training split.
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,step,lr,train_loss,train_acc,val_acc";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{:e},{:.9},{:.6},{:.6}",
                e.epoch, e.step, e.lr, e.train_loss, e.train_acc, e.val_acc
            );
        }
        s
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    /// Epoch with the highest validation accuracy (earliest on ties).
    pub fn best(&self) -> Option<&EpochLog> {
        self.epochs
            .iter()
            .fold(None, |best: Option<&EpochLog>, e| match best {
                Some(b) if b.val_acc >= e.val_acc => Some(b),
                _ => Some(e),
            })
    }
}

/// Where `fit` writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub dir: PathBuf,
}

impl Outputs {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
    pub fn last_path(&self) -> PathBuf {
        self.dir.join("last.pcnv")
    }
    pub fn best_path(&self) -> PathBuf {
        self.dir.join("best.pcnv")
    }
}

/// Eval-mode accuracy and mean label-free cross-entropy over a dataset.
pub fn evaluate(model: &PatchConvNet, ds: &Dataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Ok((0.0, 0.0));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let parts: Vec<(usize, f64)> = idx
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let (x, labels) = ds.batch(chunk)?;
            let logits = model.eval(&x)?.logits;
            let correct = argmax_rows(&logits).iter().zip(&labels).filter(|(p, y)| p == y).count();
            let loss = label_smoothing_ce(&logits, &labels, 0.0)? * chunk.len() as f64;
            Ok((correct, loss))
        })
        .collect::<Result<_>>()?;
    let n = ds.len() as f64;
    let correct: usize = parts.iter().map(|p| p.0).sum();
    let loss: f64 = parts.iter().map(|p| p.1).sum();
    Ok((correct as f64 / n, loss / n))
}

fn check_classes(model: &PatchConvNet, ds: &Dataset) -> Result<()> {
    let k = model.config.num_classes;
    if ds.num_classes() != k {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model predicts {k}",
            ds.num_classes()
        )));
    }
    Ok(())
}

/// Trains `model` in place. Deterministic given `plan.seed`.
pub fn fit(
    model: &mut PatchConvNet,
    train: &Dataset,
    val: &Dataset,
    plan: &TrainPlan,
    out: Option<&Outputs>,
) -> Result<TrainLog> {
    check_classes(model, train)?;
    check_classes(model, val)?;
    if plan.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(0.0..1.0).contains(&plan.drop_path) {
        return Err(Error::Config(format!("drop_path {} outside [0, 1)", plan.drop_path)));
    }
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    if let Some(o) = out {
        fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
    }
    let mut log = TrainLog::default();
    if plan.epochs == 0 {
        return Ok(log);
    }
    model.config.drop_path = plan.drop_path;

    let k = model.config.num_classes;
    let steps_per_epoch = train.len().div_ceil(plan.batch_size);
    let total = plan.epochs * steps_per_epoch;
    let warmup = ((total as f64 * plan.warmup_frac).round() as usize).min(total.saturating_sub(1));
    let mut opt = OptimState::new(&model.params, plan.optim());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(plan.seed.wrapping_add(1));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(plan.seed.wrapping_add(2));
    let pad = train.resolution / 8;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut lr = 0.0;
    let mut initial_loss = None;
    let mut high_epochs = 0;
    let mut best_val = f64::NEG_INFINITY;

    for epoch in 1..=plan.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(plan.batch_size) {
            let images: Vec<Tensor> = chunk
                .iter()
                .map(|&i| {
                    let img = &train.items[i].image;
                    if plan.augment {
                        augment(img, pad, &mut aug_rng)
                    } else {
                        img.clone()
                    }
                })
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.items[i].label).collect();
            let x = Tensor::stack(&images.iter().collect::<Vec<_>>())?;

            let mut tape = Tape::new().allow_non_finite();
            let vars = model.bind(&mut tape);
            let xv = tape.constant(&x);
            let mut bn = std::mem::take(&mut model.bn_states);
            let mut st = Stochastic {
                mode: Mode::Train,
                drop_path: plan.drop_path,
                rng: &mut drop_rng,
            };
            let graph = model.graph(&mut tape, xv, &vars, &mut bn, &mut st);
            model.bn_states = bn;
            let graph = graph?;
            let target = smoothed_targets(&labels, k, plan.label_smoothing)?;
            let loss = tape.soft_target_cross_entropy(graph.logits, target)?;
            let loss_value = tape.value(loss)[0];
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: step + 1,
                    detail: format!("loss is {loss_value}"),
                });
            }
            initial_loss.get_or_insert(loss_value);
            tape.backward(loss)?;
            for (p, &v) in model.params.iter_mut().zip(&vars) {
                p.tensor.grad = Some(tape.grad_or_zeros(v));
            }
            lr = half_cosine_lr(step, total, plan.base_lr, plan.min_lr, warmup)?;
            lamb_step(&mut model.params, &mut opt, lr)?;
            model.params.zero_grads();
            step += 1;
            loss_sum += loss_value * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        if model.params.iter().any(|p| !p.tensor.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                step,
                detail: "non-finite parameters".into(),
            });
        }
        if train_loss > DIVERGENCE_FACTOR * initial_loss.unwrap_or(f64::INFINITY) {
            high_epochs += 1;
            if high_epochs >= DIVERGENCE_EPOCHS {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!(
                        "loss {train_loss:.4} above {DIVERGENCE_FACTOR}x the initial {:.4} for {DIVERGENCE_EPOCHS} epochs",
                        initial_loss.unwrap()
                    ),
                });
            }
        } else {
            high_epochs = 0;
        }

        let (train_acc, _) = evaluate(model, train)?;
        let (val_acc, _) = evaluate(model, val)?;
        log.epochs.push(EpochLog {
            epoch,
            step,
            lr,
            train_loss,
            train_acc,
            val_acc,
        });
        if let Some(o) = out {
            let path = o.log_path();
            fs::write(&path, log.to_csv()).map_err(|e| Error::io(&path, e))?;
            if val_acc > best_val {
                best_val = val_acc;
                checkpoint::save(model, &o.best_path())?;
            }
        }
    }
    if let Some(o) = out {
        checkpoint::save(model, &o.last_path())?;
    }
    Ok(log)
}

/// Continues training at `resolution`; datasets at another resolution are
/// resampled first. Weights are used unchanged.
pub fn finetune_resolution(
    model: &mut PatchConvNet,
    train: &Dataset,
    val: &Dataset,
    resolution: usize,
    plan: &TrainPlan,
    out: Option<&Outputs>,
) -> Result<TrainLog> {
    check_resolution(resolution, resolution)?;
    let resize = |d: &Dataset| {
        if d.resolution == resolution {
            Ok(d.clone())
        } else {
            d.resized(resolution)
        }
    };
    let (train, val) = (resize(train)?, resize(val)?);
    fit(model, &train, &val, plan, out)
}

/// Saves `model` as the run's last checkpoint.
pub fn save_outputs(model: &PatchConvNet, out: &Outputs) -> Result<()> {
    fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    checkpoint::save(model, &out.last_path())
}

pub fn write_log(log: &TrainLog, path: &Path) -> Result<()> {
    fs::write(path, log.to_csv()).map_err(|e| Error::io(path, e))
}
