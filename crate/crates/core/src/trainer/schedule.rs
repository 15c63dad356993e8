use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub plateau_patience: usize,
    pub factor: f64,
    pub early_stop_patience: usize,
    pub min_delta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            plateau_patience: 4,
            factor: 0.25,
            early_stop_patience: 10,
            min_delta: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Continue,
    ReduceLr,
    Stop,
}

/// Reduce-on-plateau plus early stopping, keyed on validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub cfg: ScheduleConfig,
    pub best: f64,
    pub epochs_since_improve: usize,
    plateau_count: usize,
    initial_lr: f64,
    reductions: i32,
}

impl Schedule {
    pub fn new(initial_lr: f64, cfg: ScheduleConfig) -> Self {
        Schedule {
            cfg,
            best: f64::INFINITY,
            epochs_since_improve: 0,
            plateau_count: 0,
            initial_lr,
            reductions: 0,
        }
    }

    /// `initial_lr * factor^k` after `k` reductions.
    pub fn lr(&self) -> f64 {
        self.initial_lr * self.cfg.factor.powi(self.reductions)
    }

    pub fn reductions(&self) -> i32 {
        self.reductions
    }

    /// Call once per epoch with that epoch's validation loss.
    pub fn observe(&mut self, val_loss: f64) -> Action {
        if val_loss < self.best - self.cfg.min_delta {
            self.best = val_loss;
            self.epochs_since_improve = 0;
            self.plateau_count = 0;
            return Action::Continue;
        }
        self.epochs_since_improve += 1;
        self.plateau_count += 1;
        if self.epochs_since_improve >= self.cfg.early_stop_patience {
            Action::Stop
        } else if self.plateau_count >= self.cfg.plateau_patience {
            self.plateau_count = 0;
            self.reductions += 1;
            Action::ReduceLr
        } else {
            Action::Continue
        }
    }
}
