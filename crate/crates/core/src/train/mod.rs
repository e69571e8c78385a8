//! Optimizer, learning-rate schedule, checkpoints and the training loop.

pub mod adamw;
pub mod checkpoint;
pub mod schedule;
pub mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{QksError, Result};
use crate::model::LossKind;

pub use adamw::{adamw_step, AdamWConfig, OptimState};
pub use checkpoint::Checkpoint;
pub use schedule::{plateau_schedule, PlateauConfig, ScheduleState};
pub use trainer::{train, train_in_memory, LogRow, TrainOutcome, Trainer, SEED_INIT, SEED_SHUFFLE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub adamw: AdamWConfig,
    pub plateau: PlateauConfig,
    /// Steps between checkpoints; the final step is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            loss: LossKind::Classification,
            adamw: AdamWConfig::default(),
            plateau: PlateauConfig::default(),
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(QksError::Config("train.batch_size must be positive".into()));
        }
        let a = &self.adamw;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(QksError::Config(format!("learning rate {} must be positive", a.lr)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(QksError::Config("betas must lie in [0, 1) and eps be positive".into()));
        }
        let p = &self.plateau;
        if p.factor <= 1.0 || !(0.0..1.0).contains(&p.ema) || p.patience == 0 {
            return Err(QksError::Config(
                "plateau factor must exceed 1, ema lie in [0, 1), patience be positive".into(),
            ));
        }
        Ok(())
    }
}
