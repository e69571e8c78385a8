//! Reduce-on-plateau learning rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    /// Steps between evaluations.
    pub every: usize,
    /// Smoothing coefficient of the loss EMA.
    pub ema: f64,
    /// Minimum relative improvement that resets the patience counter.
    pub threshold: f64,
    /// Evaluations without improvement before a decay.
    pub patience: usize,
    pub factor: f64,
    /// Floor as a fraction of the initial learning rate.
    pub floor_ratio: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            every: 200,
            ema: 0.9,
            threshold: 1e-4,
            patience: 5,
            factor: 10.0,
            floor_ratio: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub lr: f64,
    pub floor: f64,
    /// Best smoothed loss since the last decay.
    pub best: Option<f64>,
    pub evals_since_improvement: usize,
    pub decays: usize,
    /// Exponential moving average of the per-step loss.
    pub smoothed: Option<f64>,
    pub steps_seen: usize,
}

impl ScheduleState {
    pub fn new(lr: f64, cfg: &PlateauConfig) -> Self {
        Self {
            lr,
            floor: lr * cfg.floor_ratio,
            best: None,
            evals_since_improvement: 0,
            decays: 0,
            smoothed: None,
            steps_seen: 0,
        }
    }

    /// Feed one training-step loss; every `cfg.every` steps the smoothed
    /// loss is evaluated. Returns the new rate when it changed.
    pub fn observe_step(&mut self, loss: f64, cfg: &PlateauConfig) -> Option<f64> {
        self.smoothed = Some(match self.smoothed {
            None => loss,
            Some(s) => cfg.ema * s + (1.0 - cfg.ema) * loss,
        });
        self.steps_seen += 1;
        if cfg.every > 0 && self.steps_seen.is_multiple_of(cfg.every) {
            plateau_schedule(self.smoothed.unwrap(), self, cfg)
        } else {
            None
        }
    }
}

/// One evaluation of the smoothed loss. After `patience` evaluations in a
/// row without a relative improvement above `threshold`, the rate is divided
/// by `factor` (not below the floor) and the counters restart.
pub fn plateau_schedule(loss_eval: f64, state: &mut ScheduleState, cfg: &PlateauConfig) -> Option<f64> {
    let improved = match state.best {
        None => true,
        Some(best) => loss_eval < best - cfg.threshold * best.abs(),
    };
    if improved {
        state.best = Some(loss_eval);
        state.evals_since_improvement = 0;
        return None;
    }
    state.evals_since_improvement += 1;
    if state.evals_since_improvement < cfg.patience || state.lr <= state.floor {
        return None;
    }
    state.lr = (state.lr / cfg.factor).max(state.floor);
    state.decays += 1;
    state.best = Some(loss_eval);
    state.evals_since_improvement = 0;
    Some(state.lr)
}
