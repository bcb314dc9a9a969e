use super::TrainError;

/// Warm-up, plateau, then halving every `decay_every` iterations. Breakpoints
/// are given at full scale and multiplied by `scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup_lr: f64,
    pub base_lr: f64,
    pub warmup_iters: u64,
    pub plateau_iters: u64,
    pub decay_every: u64,
    pub scale: f64,
}

/// Default desk-scale factor: 10k iterations become 100.
pub const DEFAULT_SCALE: f64 = 0.01;

impl Default for LrSchedule {
    fn default() -> Self {
        Self::full_scale().with_scale(DEFAULT_SCALE)
    }
}

impl LrSchedule {
    pub fn full_scale() -> Self {
        LrSchedule {
            warmup_lr: 1e-6,
            base_lr: 1e-4,
            warmup_iters: 10_000,
            // The first halving lands at 410k.
            plateau_iters: 400_000,
            decay_every: 100_000,
            scale: 1.0,
        }
    }

    pub fn with_scale(self, scale: f64) -> Self {
        LrSchedule { scale, ..self }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(TrainError::Config(format!("scale factor must be positive, got {}", self.scale)));
        }
        if !(self.warmup_lr >= 0.0 && self.base_lr >= 0.0) {
            return Err(TrainError::Config("learning rates must be non-negative".into()));
        }
        if self.decay_every == 0 {
            return Err(TrainError::Config("decay_every must be positive".into()));
        }
        Ok(())
    }

    /// A full-scale iteration count under this schedule's scale (at least 1).
    pub fn scaled(&self, iterations: u64) -> u64 {
        ((iterations as f64 * self.scale).round() as u64).max(1)
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        let warmup = self.scaled(self.warmup_iters);
        let decay_start = warmup + self.scaled(self.plateau_iters);
        if iteration < warmup {
            self.warmup_lr
        } else if iteration < decay_start {
            self.base_lr
        } else {
            let halvings = 1 + (iteration - decay_start) / self.scaled(self.decay_every);
            self.base_lr / 2f64.powi(halvings.min(1000) as i32)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_values() {
        let s = LrSchedule::full_scale();
        assert_eq!(s.lr_at(0), 1e-6);
        assert_eq!(s.lr_at(9_999), 1e-6);
        assert_eq!(s.lr_at(10_000), 1e-4);
        assert_eq!(s.lr_at(310_000), 1e-4);
        assert_eq!(s.lr_at(409_999), 1e-4);
        assert_eq!(s.lr_at(410_000), 5e-5);
        assert_eq!(s.lr_at(509_999), 5e-5);
        assert_eq!(s.lr_at(510_000), 2.5e-5);
        assert_eq!(s.lr_at(610_000), 1.25e-5);
    }

    #[test]
    fn desk_scale_breakpoints() {
        let s = LrSchedule::default();
        assert_eq!((s.scaled(10_000), s.scaled(300_000), s.scaled(100_000)), (100, 3000, 1000));
        assert_eq!(s.lr_at(99), 1e-6);
        assert_eq!(s.lr_at(100), 1e-4);
        assert_eq!(s.lr_at(4_100), 5e-5);
    }
}
