use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

impl Schedule {
    pub fn lr(self, step: usize, total_steps: usize, base_lr: f64) -> f64 {
        match self {
            Schedule::Cosine => cosine_lr(step, total_steps, base_lr),
            Schedule::Constant => base_lr,
        }
    }
}

/// `base · (1 + cos(π·step/total)) / 2`, clamped to 0 past the end.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return if step == 0 && total_steps == 0 { base_lr } else { 0.0 };
    }
    base_lr * (1.0 + (PI * step as f64 / total_steps as f64).cos()) / 2.0
}
