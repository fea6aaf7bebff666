//! Grid-search training loop. Every (lr, wd) cell trains a fresh copy from
//! identical init with an RNG stream derived from the cell's values, so
//! parallel and serial schedules (and either grid enumeration order)
//! produce identical outcomes.

use crate::error::{Error, Result};
use crate::harness::data::{Dataset, SplitDataset};
use crate::harness::derive_seed;
use crate::harness::optim::{Optimizer, OptimizerKind};
use crate::peft::AdaptedModel;
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Anything the harness can train: adapted models and subspace
/// reparameterizations both expose path-addressed trainable tensors.
pub trait Trainable: Clone + Send + Sync {
    /// Build the training graph; returns logits and the trainable bindings.
    fn forward_train(&self, tape: &mut Tape, images: &Tensor)
        -> Result<(Var, Vec<(String, Var)>)>;

    /// Logits with every parameter frozen.
    fn eval_logits(&self, images: &Tensor) -> Result<Tensor>;

    fn param_mut(&mut self, path: &str) -> Option<&mut Tensor>;

    /// Bytes of persistent parameters (for the peak-memory figure).
    fn param_bytes(&self) -> usize;
}

impl Trainable for AdaptedModel {
    fn forward_train(
        &self,
        tape: &mut Tape,
        images: &Tensor,
    ) -> Result<(Var, Vec<(String, Var)>)> {
        let out = self.forward(tape, images, true)?;
        Ok((out.logits, out.trainable))
    }

    fn eval_logits(&self, images: &Tensor) -> Result<Tensor> {
        AdaptedModel::eval_logits(self, images)
    }

    fn param_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        AdaptedModel::param_mut(self, path)
    }

    fn param_bytes(&self) -> usize {
        AdaptedModel::param_bytes(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr_grid: Vec<f64>,
    pub wd_grid: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Record a validation point every this many epochs (0: final only).
    pub eval_every: usize,
    pub seed: u64,
    /// Run grid cells on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::sgd(),
            lr_grid: vec![1e-3, 1e-2, 1e-1],
            wd_grid: vec![0.0, 1e-4],
            epochs: 50,
            batch_size: 32,
            eval_every: 0,
            seed: 0,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() || self.wd_grid.is_empty() {
            return Err(Error::InvalidInput("lr/wd grids must be non-empty".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn single_cell(mut self, lr: f64, wd: f64) -> Self {
        self.lr_grid = vec![lr];
        self.wd_grid = vec![wd];
        self
    }
}

/// One trained cell's outcome.
#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub lr: f64,
    pub wd: f64,
    /// Final validation accuracy; `None` marks a diverged cell.
    pub val_accuracy: Option<f64>,
    pub steps: usize,
    pub peak_tape_bytes: usize,
    /// (epoch, val accuracy) checkpoints when `eval_every > 0`.
    pub curve: Vec<(usize, f64)>,
}

pub struct GridOutcome<T> {
    pub best_lr: f64,
    pub best_wd: f64,
    pub best_model: T,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub cells: Vec<CellReport>,
    pub failed_cells: usize,
    pub total_steps: usize,
    pub peak_bytes: usize,
}

/// Mean argmax accuracy over a dataset (0 for an empty set).
pub fn evaluate<T: Trainable>(model: &T, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let idxs: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in idxs.chunks(batch_size.max(1)) {
        let (images, labels) = ds.batch(chunk);
        let logits = model.eval_logits(&images)?;
        let c = ds.classes;
        for (row, &label) in logits.data().chunks(c).zip(&labels) {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

struct RunOutcome {
    val_accuracy: Option<f64>,
    steps: usize,
    peak_tape_bytes: usize,
    curve: Vec<(usize, f64)>,
}

/// Train `model` in place for the configured epochs at one (lr, wd) point.
fn train_once<T: Trainable>(
    model: &mut T,
    train: &Dataset,
    val: &Dataset,
    lr: f64,
    wd: f64,
    cfg: &TrainConfig,
    run_seed: u64,
) -> Result<RunOutcome> {
    let mut opt = Optimizer::new(cfg.optimizer, lr, wd);
    let mut idxs: Vec<usize> = (0..train.len()).collect();
    let mut steps = 0usize;
    let mut peak = 0usize;
    let mut curve = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed, &[5, epoch as u64]));
        idxs.shuffle(&mut rng);
        for chunk in idxs.chunks(cfg.batch_size) {
            let (images, labels) = train.batch(chunk);
            let mut tape = Tape::new();
            let (logits, trainable) = model.forward_train(&mut tape, &images)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            if !tape.value(loss).item().is_finite() {
                return Ok(RunOutcome {
                    val_accuracy: None,
                    steps,
                    peak_tape_bytes: peak,
                    curve,
                });
            }
            tape.backward(loss)?;
            for (path, var) in &trainable {
                let Some(grad) = tape.grad(*var) else { continue };
                let param = model
                    .param_mut(path)
                    .ok_or_else(|| Error::MissingParam(path.clone()))?;
                if opt.step(path, param, grad).is_err() {
                    return Ok(RunOutcome {
                        val_accuracy: None,
                        steps,
                        peak_tape_bytes: peak,
                        curve,
                    });
                }
            }
            peak = peak.max(tape.peak_bytes());
            steps += 1;
        }
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            curve.push((epoch + 1, evaluate(model, val, cfg.batch_size)?));
        }
    }
    let final_acc = evaluate(model, val, cfg.batch_size)?;
    Ok(RunOutcome {
        val_accuracy: Some(final_acc),
        steps,
        peak_tape_bytes: peak,
        curve,
    })
}

/// Train one fresh copy per (lr, wd) cell, select the best final validation
/// accuracy (ties to the lower lr, then lower wd), and report the selected
/// cell's test accuracy. Diverged cells are recorded, not fatal; a fully
/// diverged grid is an error.
pub fn grid_search_train<T: Trainable>(
    proto: &T,
    data: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<GridOutcome<T>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }

    // sort cells by (lr, wd) so selection and seeding are independent of the
    // grid's enumeration order
    let mut cells: Vec<(f64, f64)> = Vec::new();
    for &lr in &cfg.lr_grid {
        for &wd in &cfg.wd_grid {
            cells.push((lr, wd));
        }
    }
    cells.sort_by(|a, b| a.partial_cmp(b).expect("finite grid values"));
    cells.dedup();

    let run_cell = |&(lr, wd): &(f64, f64)| -> Result<(CellReport, T)> {
        let mut model = proto.clone();
        let run_seed = derive_seed(cfg.seed, &[6, lr.to_bits(), wd.to_bits()]);
        let outcome = train_once(&mut model, &data.train, &data.val, lr, wd, cfg, run_seed)?;
        Ok((
            CellReport {
                lr,
                wd,
                val_accuracy: outcome.val_accuracy,
                steps: outcome.steps,
                peak_tape_bytes: outcome.peak_tape_bytes,
                curve: outcome.curve,
            },
            model,
        ))
    };

    let results: Vec<(CellReport, T)> = if cfg.parallel {
        cells.par_iter().map(run_cell).collect::<Result<_>>()?
    } else {
        cells.iter().map(run_cell).collect::<Result<_>>()?
    };

    let mut best: Option<usize> = None;
    for (i, (report, _)) in results.iter().enumerate() {
        let Some(acc) = report.val_accuracy else { continue };
        let better = match best {
            None => true,
            // strict improvement only: earlier cells have lower (lr, wd)
            Some(j) => acc > results[j].0.val_accuracy.unwrap(),
        };
        if better {
            best = Some(i);
        }
    }
    let best = best.ok_or(Error::AllCellsFailed)?;

    let failed_cells = results
        .iter()
        .filter(|(r, _)| r.val_accuracy.is_none())
        .count();
    let total_steps = results.iter().map(|(r, _)| r.steps).sum();
    let peak_tape = results
        .iter()
        .map(|(r, _)| r.peak_tape_bytes)
        .max()
        .unwrap_or(0);

    let (reports, mut models): (Vec<CellReport>, Vec<T>) = results.into_iter().unzip();
    let best_model = models.swap_remove(best);
    let test_accuracy = evaluate(&best_model, &data.test, cfg.batch_size)?;
    let peak_bytes = peak_tape + best_model.param_bytes();

    Ok(GridOutcome {
        best_lr: reports[best].lr,
        best_wd: reports[best].wd,
        val_accuracy: reports[best].val_accuracy.unwrap(),
        test_accuracy,
        best_model,
        cells: reports,
        failed_cells,
        total_steps,
        peak_bytes,
    })
}
