//! Deterministic training loop.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::adamw::{adamw_step, OptimState};
use super::checkpoint::Checkpoint;
use super::schedule::ScheduleState;
use crate::config::RunConfig;
use crate::error::{QksError, Result};
use crate::io::{epoch_batches, DatasetManifest, InMemorySplit, Split};
use crate::model::{QksModel, SpatialFeatures};
use crate::numerics::{Rng, Scalar};
use crate::prompt_pool::LabelEmbeddingTable;

/// Purposes passed to [`Rng::derive_seed`].
pub const SEED_INIT: u64 = 1;
pub const SEED_SHUFFLE: u64 = 2;

/// One line of the loss log: the batch loss before the update of `step`,
/// and the rate that update used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,lr,loss";

    pub fn to_csv(&self) -> String {
        format!("{},{:e},{:e}", self.step, self.lr, self.loss)
    }
}

pub struct Trainer<T> {
    run: RunConfig,
    model: QksModel<T>,
    optim: OptimState<T>,
    schedule: ScheduleState,
    data: InMemorySplit<T>,
    labels: LabelEmbeddingTable<T>,
    step: usize,
    shuffle_seed: u64,
    epoch: Option<(u64, Vec<Vec<usize>>)>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model initialized from `run.seed`. `run.model` must already
    /// match the data dimensions.
    pub fn new(run: RunConfig, data: InMemorySplit<T>, labels: LabelEmbeddingTable<T>) -> Result<Self> {
        run.validate()?;
        let mut rng = Rng::new(Rng::derive_seed(run.seed, SEED_INIT));
        let model = QksModel::init(run.model.clone(), &mut rng)?;
        let optim = OptimState::new(&run.train.adamw, model.params.trainable().into_iter().map(|(_, t)| t));
        let schedule = ScheduleState::new(run.train.adamw.lr, &run.train.plateau);
        Self::assemble(run, model, optim, schedule, 0, data, labels)
    }

    /// Continue from a saved state.
    pub fn resume(ckpt: Checkpoint<T>, data: InMemorySplit<T>, labels: LabelEmbeddingTable<T>) -> Result<Self> {
        Self::assemble(ckpt.run, ckpt.model, ckpt.optim, ckpt.schedule, ckpt.step, data, labels)
    }

    fn assemble(
        run: RunConfig,
        model: QksModel<T>,
        optim: OptimState<T>,
        schedule: ScheduleState,
        step: usize,
        data: InMemorySplit<T>,
        labels: LabelEmbeddingTable<T>,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(QksError::Manifest("training split is empty".into()));
        }
        if labels.dim() != model.config.d {
            return Err(QksError::Config(format!(
                "label embeddings have width {}, model width is {}",
                labels.dim(),
                model.config.d
            )));
        }
        Ok(Self {
            shuffle_seed: Rng::derive_seed(run.seed, SEED_SHUFFLE),
            run,
            model,
            optim,
            schedule,
            data,
            labels,
            step,
            epoch: None,
        })
    }

    pub fn model(&self) -> &QksModel<T> {
        &self.model
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.optim.lr
    }

    pub fn schedule(&self) -> &ScheduleState {
        &self.schedule
    }

    pub fn labels(&self) -> &LabelEmbeddingTable<T> {
        &self.labels
    }

    fn batch_indices(&mut self) -> Vec<usize> {
        let n = self.data.len();
        let bs = self.run.train.batch_size.min(n);
        let per_epoch = n.div_ceil(bs);
        let epoch = (self.step / per_epoch) as u64;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.epoch = Some((epoch, epoch_batches(n, bs, self.shuffle_seed, epoch)));
        }
        self.epoch.as_ref().unwrap().1[self.step % per_epoch].clone()
    }

    /// Batch, forward, loss, backward, AdamW update, schedule.
    pub fn step(&mut self) -> Result<LogRow> {
        let indices = self.batch_indices();
        let images: Vec<&SpatialFeatures<T>> = indices.iter().map(|&i| &self.data.features[i]).collect();
        let positives: Vec<&[usize]> = indices.iter().map(|&i| self.data.labels[i].as_slice()).collect();
        let step = self.step;
        let out = self
            .model
            .batch_loss_and_grad(&images, &positives, &self.labels, self.run.train.loss)
            .map_err(|e| match e {
                QksError::NonFinite(what) | QksError::NonFiniteGradient(what) => {
                    log::error!("step {step}: non-finite values in {what}");
                    QksError::Divergence { step, loss: f64::NAN }
                }
                e => e,
            })?;
        if !out.loss.is_finite() {
            return Err(QksError::Divergence {
                step: self.step,
                loss: out.loss,
            });
        }
        let row = LogRow {
            step: self.step,
            lr: self.optim.lr,
            loss: out.loss,
        };
        let grads: Vec<_> = out.grads.trainable().into_iter().map(|(_, t)| t).collect();
        adamw_step(&mut self.model.params.trainable_mut(), &grads, &mut self.optim)?;
        if let Some(lr) = self.schedule.observe_step(out.loss, &self.run.train.plateau) {
            log::info!("step {}: learning rate reduced to {lr:e}", self.step);
            self.optim.lr = lr;
        }
        self.step += 1;
        Ok(row)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            step: self.step,
            run: self.run.clone(),
            model: self.model.clone(),
            optim: self.optim.clone(),
            schedule: self.schedule.clone(),
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: QksModel<f32>,
    pub log: Vec<LogRow>,
    pub checkpoint: PathBuf,
    pub run: RunConfig,
}

/// Train on the manifest's train split in f32, writing `config.json`,
/// `loss.csv` and `checkpoint/` under `out_dir`. On divergence the error is
/// returned and the last saved checkpoint is left in place.
pub fn train(manifest: &DatasetManifest, run: &RunConfig, out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    let out_dir = out_dir.as_ref();
    let run = run.fit_to_manifest(manifest);
    run.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| QksError::io(out_dir, e))?;
    run.save(out_dir.join("config.json"))?;

    let data = InMemorySplit::<f32>::load(manifest, Split::Train)?;
    let labels = manifest.label_table::<f32>()?;
    let mut trainer = Trainer::new(run.clone(), data, labels)?;

    let ckpt_dir = out_dir.join("checkpoint");
    let log_path = out_dir.join("loss.csv");
    let file = fs::File::create(&log_path).map_err(|e| QksError::io(&log_path, e))?;
    let mut csv = BufWriter::new(file);
    let io_err = |e| QksError::io(&log_path, e);
    writeln!(csv, "{}", LogRow::CSV_HEADER).map_err(io_err)?;

    let steps = run.train.steps;
    let every = run.train.checkpoint_every;
    let mut log = Vec::with_capacity(steps);
    if steps == 0 {
        trainer.checkpoint().save(&ckpt_dir)?;
    }
    for _ in 0..steps {
        let row = match trainer.step() {
            Ok(row) => row,
            Err(e) => {
                csv.flush().map_err(io_err)?;
                return Err(e);
            }
        };
        writeln!(csv, "{}", row.to_csv()).map_err(io_err)?;
        log.push(row);
        let done = trainer.step_count();
        if done == steps || (every > 0 && done % every == 0) {
            csv.flush().map_err(io_err)?;
            trainer.checkpoint().save(&ckpt_dir)?;
            log::info!("step {done}: loss {:.5}, checkpoint saved", row.loss);
        }
    }
    csv.flush().map_err(io_err)?;
    Ok(TrainOutcome {
        model: trainer.model().clone(),
        log,
        checkpoint: ckpt_dir,
        run,
    })
}

/// Train without touching the filesystem; returns the final model and log.
pub fn train_in_memory<T: Scalar>(
    run: RunConfig,
    data: InMemorySplit<T>,
    labels: LabelEmbeddingTable<T>,
) -> Result<(QksModel<T>, Vec<LogRow>)> {
    let steps = run.train.steps;
    let mut trainer = Trainer::new(run, data, labels)?;
    let log = (0..steps).map(|_| trainer.step()).collect::<Result<Vec<_>>>()?;
    Ok((trainer.model, log))
}
