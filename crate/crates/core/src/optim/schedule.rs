use serde::{Deserialize, Serialize};

/// Linear warmup, constant plateau, exponential decay.
///
/// `lr(0) = 0` when there is a warmup; the plateau holds `peak_lr`; over the
/// decay phase the rate falls geometrically and equals
/// `peak_lr / decay_factor` exactly at the final step and after it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub constant_steps: u64,
    pub decay_steps: u64,
    pub decay_factor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 100,
            constant_steps: 800,
            decay_steps: 100,
            decay_factor: 8.0,
        }
    }
}

impl Schedule {
    pub fn constant(lr: f64, steps: u64) -> Self {
        Self {
            peak_lr: lr,
            warmup_steps: 0,
            constant_steps: steps,
            decay_steps: 0,
            decay_factor: 1.0,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.warmup_steps + self.constant_steps + self.decay_steps
    }

    /// Last step of the constant phase.
    pub fn constant_end(&self) -> u64 {
        self.warmup_steps + self.constant_steps
    }

    /// `lr(step) / peak_lr`.
    pub fn factor(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return step as f64 / self.warmup_steps as f64;
        }
        let k = step.saturating_sub(self.constant_end());
        if k == 0 {
            1.0
        } else if k >= self.decay_steps {
            1.0 / self.decay_factor
        } else {
            self.decay_factor.powf(-(k as f64) / self.decay_steps as f64)
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        self.peak_lr * self.factor(step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_points() {
        let s = Schedule {
            peak_lr: 4e-3,
            warmup_steps: 10,
            constant_steps: 20,
            decay_steps: 30,
            decay_factor: 8.0,
        };
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(5), 2e-3);
        assert_eq!(s.lr(10), 4e-3);
        assert_eq!(s.lr(30), 4e-3);
        assert_eq!(s.lr(60), 4e-3 / 8.0);
        assert_eq!(s.lr(1000), 4e-3 / 8.0);
        assert!((s.lr(45) - 4e-3 / 8f64.sqrt()).abs() < 1e-15);
        for t in 31..60 {
            assert!(s.lr(t) < s.lr(t - 1));
        }
    }

    #[test]
    fn without_decay_the_plateau_persists() {
        let s = Schedule::constant(1e-3, 50);
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(50), 1e-3);
    }
}
