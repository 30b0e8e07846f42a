//! Warmup then step-decay learning rates.

use crate::train::TrainConfig;

/// `(backbone, head)` learning rates for `epoch` (0-based).
///
/// During the first `warmup_epochs` epochs the rate ramps linearly,
/// `base * (epoch + 1) / warmup_epochs`, reaching `base` at the end of the
/// ramp. Each entry of `decay_epochs` already passed divides by
/// `decay_factor` once more.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> (f64, f64) {
    let factor = if epoch < cfg.warmup_epochs {
        (epoch + 1) as f64 / cfg.warmup_epochs as f64
    } else {
        1.0
    };
    let mut bb = cfg.base_lr_backbone * factor;
    let mut hd = cfg.base_lr_head * factor;
    for &d in &cfg.decay_epochs {
        if epoch >= d {
            bb /= cfg.decay_factor;
            hd /= cfg.decay_factor;
        }
    }
    (bb, hd)
}
