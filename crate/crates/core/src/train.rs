//! The optimization loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Checkpoint, ParamStore};
use crate::config::ModelConfig;
use crate::counter::{Mode, RedundantCountMap};
use crate::data::{crop_training_patch, fit_to_patches, resize_shortest_side, Sample};
use crate::error::{Error, Result};
use crate::geometry::ExemplarSet;
use crate::metrics::{compute_metrics, evaluate, Shots, MPE_EPS};
use crate::model::{Forward, TasselModel};
use crate::optim::{AdamW, AdamWConfig, OneCycle};
use crate::raster::Raster;
use crate::supervision::{density_from_dots, gated_l1_loss, mosaic_augment, redundant_gt};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    /// Fraction of steps spent in linear warmup.
    pub warmup: f64,
    /// Final learning rate is `base_lr / final_div`.
    pub final_div: f64,
    /// Probability of replacing a sample by a mosaic.
    pub mosaic_prob: f64,
    /// Density kernel `σ = max(kernel_min_sigma, s / kernel_divisor)`.
    pub kernel_divisor: f64,
    pub kernel_min_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            epochs: 200,
            batch_size: 8,
            adamw: AdamWConfig::default(),
            warmup: 0.3,
            final_div: 1e4,
            mosaic_prob: 0.5,
            kernel_divisor: 4.0,
            kernel_min_sigma: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Schedule for the tiny model trained from scratch: 30 epochs at a
    /// higher peak rate than the full preset.
    pub fn tiny() -> Self {
        Self {
            base_lr: 1e-3,
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return fail(format!("base_lr {} must be positive", self.base_lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup) || self.final_div < 1.0 {
            return fail("warmup must lie in [0, 1) and final_div be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.mosaic_prob) {
            return fail("mosaic_prob must lie in [0, 1]".into());
        }
        if !(self.kernel_divisor > 0.0 && self.kernel_min_sigma > 0.0) {
            return fail("kernel parameters must be positive".into());
        }
        Ok(())
    }

    pub fn sigma(&self, s: f64) -> f64 {
        (s / self.kernel_divisor).max(self.kernel_min_sigma)
    }
}

/// Resizes a sample for the model (shortest side to `image_size`, sides
/// snapped to the patch grid) and builds its exemplars from the full image.
pub fn prepare(sample: &Sample, cfg: &ModelConfig) -> Result<(Sample, ExemplarSet)> {
    let resized = fit_to_patches(&resize_shortest_side(sample, cfg.image_size), cfg.patch_size);
    let ex = ExemplarSet::build(&resized.raster, &resized.ann.boxes, cfg.exemplar_size)?;
    Ok((resized, ex))
}

pub fn prepare_all(samples: &[Sample], cfg: &ModelConfig) -> Result<(Vec<Sample>, Vec<ExemplarSet>)> {
    samples.iter().map(|s| prepare(s, cfg)).collect::<Result<Vec<_>>>().map(|v| v.into_iter().unzip())
}

/// Per-branch redundant targets for `points` on an image of the given size.
pub fn branch_targets(
    model: &TasselModel,
    cfg: &TrainConfig,
    points: &[(f64, f64)],
    width: usize,
    height: usize,
    s: f64,
) -> Result<Vec<RedundantCountMap>> {
    let p = model.config().patch_size;
    let density = density_from_dots(points, width, height, cfg.sigma(s))?;
    (0..model.branch_count())
        .map(|b| {
            let b = crate::geometry::Branch(b);
            redundant_gt(&density, &model.geometry(b, (height / p, width / p))?, b)
        })
        .collect()
}

/// Builds the graph of one sample's gated loss.
pub fn sample_loss(
    model: &TasselModel,
    g: &mut Graph,
    cfg: &TrainConfig,
    image: &Raster,
    points: &[(f64, f64)],
    exemplars: &ExemplarSet,
) -> Result<(Var, Forward)> {
    let params = model
        .params()
        .tensors()
        .iter()
        .map(|t| g.param(t.clone()))
        .collect();
    sample_loss_with(model, g, params, cfg, image, points, exemplars)
}

/// [`sample_loss`] over caller-provided parameter nodes.
pub fn sample_loss_with(
    model: &TasselModel,
    g: &mut Graph,
    params: Vec<Var>,
    cfg: &TrainConfig,
    image: &Raster,
    points: &[(f64, f64)],
    exemplars: &ExemplarSet,
) -> Result<(Var, Forward)> {
    let fwd = model.forward_with(g, params, image, exemplars, Mode::Train)?;
    let gts = branch_targets(model, cfg, points, image.width(), image.height(), exemplars.scale_prior)?;
    let preds: Vec<_> = fwd.branches.iter().map(|o| (o.branch, o.map)).collect();
    let loss = gated_l1_loss(g, &preds, &gts, exemplars.scale_prior, &model.config().thresholds)?;
    Ok((loss, fwd))
}

/// Loss value and per-slot gradients of one sample. Slots the loss does not
/// reach get all-zero gradients.
pub fn sample_gradients(
    model: &TasselModel,
    cfg: &TrainConfig,
    image: &Raster,
    points: &[(f64, f64)],
    exemplars: &ExemplarSet,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let (loss, fwd) = sample_loss(model, &mut g, cfg, image, points, exemplars)?;
    g.backward(loss)?;
    let grads = fwd
        .params
        .iter()
        .enumerate()
        .map(|(slot, &v)| match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; model.params().tensor(slot).len()],
        })
        .collect();
    Ok((g.value(loss).item(), grads))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: Option<f64>,
    pub val_mae: Option<f64>,
    pub val_rmse: Option<f64>,
    pub val_r2: Option<f64>,
}

/// Resumable optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub opt: AdamW,
    pub schedule: OneCycle,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub steps_per_epoch: usize,
    pub best_val_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub optimizer_step: u64,
    pub config: TrainConfig,
    pub best_val_mae: Option<f64>,
}

const TRAIN_STATE_KEY: &str = "train_state";

/// Per-epoch random stream, independent of how many epochs ran before.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: &TasselModel, train_len: usize) -> Result<Self> {
        cfg.validate()?;
        if train_len == 0 {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let steps_per_epoch = train_len.div_ceil(cfg.batch_size);
        let schedule = OneCycle {
            base_lr: cfg.base_lr,
            total_steps: steps_per_epoch * cfg.epochs,
            warmup: cfg.warmup,
            final_div: cfg.final_div,
        };
        Ok(Self {
            opt: AdamW::new(cfg.adamw, model.params()),
            cfg,
            schedule,
            epoch: 0,
            step: 0,
            steps_per_epoch,
            best_val_mae: None,
        })
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            epoch: self.epoch,
            step: self.step,
            optimizer_step: self.opt.step,
            config: self.cfg.clone(),
            best_val_mae: self.best_val_mae,
        }
    }

    /// Restores a trainer from a checkpoint's state and optimizer tensors.
    pub fn restore(state: &TrainState, model: &TasselModel, store: &ParamStore, train_len: usize) -> Result<Self> {
        let mut t = Self::new(state.config.clone(), model, train_len)?;
        if t.steps_per_epoch * state.epoch != state.step {
            return Err(Error::Checkpoint(format!(
                "checkpoint at step {} does not match {} steps per epoch",
                state.step, t.steps_per_epoch
            )));
        }
        t.opt = AdamW::import(state.config.adamw, state.optimizer_step, model.params(), store)?;
        t.epoch = state.epoch;
        t.step = state.step;
        t.best_val_mae = state.best_val_mae;
        Ok(t)
    }

    /// Model parameters, optimizer moments and trainer state in one file.
    pub fn checkpoint(&self, model: &TasselModel) -> Checkpoint {
        let state = serde_json::to_value(self.state()).expect("state serializes");
        let mut ck = model.to_checkpoint(serde_json::json!({ TRAIN_STATE_KEY: state }));
        for (name, t) in self.opt.export(model.params()) {
            ck.tensors.insert(name, t);
        }
        ck
    }

    /// Inverse of [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, train_len: usize) -> Result<(TasselModel, Self)> {
        let (model, extra) = TasselModel::from_checkpoint(ck)?;
        let state = extra
            .get(TRAIN_STATE_KEY)
            .ok_or_else(|| Error::Checkpoint("no trainer state; not a training checkpoint".into()))?;
        let state: TrainState =
            serde_json::from_value(state.clone()).map_err(|e| Error::Checkpoint(format!("trainer state: {e}")))?;
        let trainer = Self::restore(&state, &model, &ck.tensors, train_len)?;
        Ok((model, trainer))
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Augmented crop of sample `i` for the current epoch.
    fn view<R: Rng>(&self, samples: &[Sample], i: usize, size: usize, rng: &mut R) -> Result<(Raster, Vec<(f64, f64)>)> {
        let s = &samples[i];
        let mosaic = rng.gen_bool(self.cfg.mosaic_prob);
        let aug = if mosaic { mosaic_augment(s, samples, size, rng) } else { s.clone() };
        let crop = crop_training_patch(&aug, size, rng)?;
        Ok((crop.raster, crop.points))
    }

    /// Runs one epoch. `on_step(step, loss, grads)` sees every optimizer
    /// step's batch-mean loss and gradients before the update.
    pub fn run_epoch(
        &mut self,
        model: &mut TasselModel,
        samples: &[Sample],
        exemplars: &[ExemplarSet],
        mut on_step: impl FnMut(usize, f64, &[Vec<f64>]),
    ) -> Result<f64> {
        let size = model.config().image_size;
        let mut rng = epoch_rng(self.cfg.seed, self.epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let mut grads: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (image, points) = self.view(samples, i, size, &mut rng)?;
                let (loss, g) = sample_gradients(model, &self.cfg, &image, &points, &exemplars[i])?;
                batch_loss += loss;
                for (acc, g) in grads.iter_mut().zip(g) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            batch_loss *= inv;
            grads.iter_mut().flatten().for_each(|v| *v *= inv);
            let finite = batch_loss.is_finite() && grads.iter().flatten().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Training {
                    step: self.step,
                    reason: format!("non-finite loss {batch_loss}"),
                });
            }
            on_step(self.step, batch_loss, &grads);
            let lr = self.schedule.lr(self.step);
            self.opt.update(model.params_mut(), &grads, lr)?;
            self.step += 1;
            loss_sum += batch_loss * batch.len() as f64;
        }
        self.epoch += 1;
        Ok(loss_sum / samples.len() as f64)
    }
}

/// Validation MAE, RMSE and R² with all exemplars.
pub fn validate(model: &TasselModel, samples: &[Sample], exemplars: &[ExemplarSet]) -> Result<(f64, f64, Option<f64>)> {
    let recs = evaluate(model, samples, exemplars, Shots::All)?;
    let preds: Vec<f64> = recs.iter().map(|r| r.pred).collect();
    let gts: Vec<f64> = recs.iter().map(|r| r.gt).collect();
    let r = compute_metrics(&preds, &gts, MPE_EPS)?;
    Ok((r.mae, r.rmse, r.r2))
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub log: Vec<EpochRecord>,
    pub best_params: Option<ParamStore>,
    pub best_val_mae: Option<f64>,
}

/// Hooks called by [`fit`] after every epoch.
pub trait FitObserver {
    fn epoch(&mut self, _record: &EpochRecord, _model: &TasselModel, _trainer: &Trainer, _best: bool) -> Result<()> {
        Ok(())
    }

    /// Checked before each epoch; `true` ends [`fit`] early without
    /// changing the schedule, so a later resume continues seamlessly.
    fn should_stop(&self, _trainer: &Trainer) -> bool {
        false
    }
}

impl FitObserver for () {}

/// Trains until `trainer` has run all epochs. Validation uses `val` when it
/// is non-empty; the best-validation parameters are returned.
pub fn fit(
    model: &mut TasselModel,
    trainer: &mut Trainer,
    train: (&[Sample], &[ExemplarSet]),
    val: (&[Sample], &[ExemplarSet]),
    observer: &mut dyn FitObserver,
) -> Result<FitOutcome> {
    let has_val = !val.0.is_empty();
    let mut log = Vec::new();
    let mut best_params = None;
    let record = |epoch: usize, step: usize, lr: f64, loss: Option<f64>, model: &TasselModel| -> Result<EpochRecord> {
        let (mae, rmse, r2) = if has_val {
            let (a, b, c) = validate(model, val.0, val.1)?;
            (Some(a), Some(b), c)
        } else {
            (None, None, None)
        };
        Ok(EpochRecord {
            epoch,
            step,
            lr,
            loss,
            val_mae: mae,
            val_rmse: rmse,
            val_r2: r2,
        })
    };
    if trainer.epoch == 0 {
        let r = record(0, 0, trainer.schedule.lr(0), None, model)?;
        observer.epoch(&r, model, trainer, false)?;
        log.push(r);
    }
    while !trainer.finished() && !observer.should_stop(trainer) {
        let loss = trainer.run_epoch(model, train.0, train.1, |_, _, _| {})?;
        let lr = trainer.schedule.lr(trainer.step.saturating_sub(1));
        let r = record(trainer.epoch, trainer.step, lr, Some(loss), model)?;
        let best = match (r.val_mae, trainer.best_val_mae) {
            (Some(_), None) => true,
            (Some(m), Some(b)) => m < b,
            _ => false,
        };
        if best {
            trainer.best_val_mae = r.val_mae;
            best_params = Some(model.params().clone());
        }
        observer.epoch(&r, model, trainer, best)?;
        log.push(r);
    }
    Ok(FitOutcome {
        log,
        best_params,
        best_val_mae: trainer.best_val_mae,
    })
}
