//! Two-cycle warmup and cosine-anneal learning rate of fine-tuning.

use super::config::TrainConfig;
use crate::error::{Error, Result};
use std::f64::consts::PI;

fn cycle(step: u64, len: u64, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_fraction * len as f64;
    let s = step as f64;
    if s < warm {
        return cfg.peak_lr * s / warm;
    }
    let last = (len - 1) as f64;
    if last <= warm {
        return cfg.peak_lr;
    }
    let progress = (s - warm) / (last - warm);
    cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Learning rate at global `step`.
///
/// Steps `0..phase1` form the first cycle (frozen encoder) and the next
/// `phase2` steps the second. Each cycle ramps linearly from 0 to `peak_lr`
/// over its first `warmup_fraction` and then follows a half cosine down to
/// `floor_lr`, reached on the cycle's last step.
pub fn lr_schedule(step: u64, phase1: u64, phase2: u64, cfg: &TrainConfig) -> Result<f64> {
    if step < phase1 {
        Ok(cycle(step, phase1, cfg))
    } else if step < phase1 + phase2 {
        Ok(cycle(step - phase1, phase2, cfg))
    } else {
        Err(Error::validation(
            "step",
            format!("{step} is past the schedule of {} steps", phase1 + phase2),
        ))
    }
}
