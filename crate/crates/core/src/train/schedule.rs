/// Polynomial decay from `base_lr` at step 0 to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub power: f64,
}

impl PolySchedule {
    /// `base * (1 - step / total)^power`, zero from `total` on.
    pub fn lr(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        self.base_lr * (1.0 - step as f64 / self.total_steps as f64).powf(self.power)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = PolySchedule { base_lr: 0.1, total_steps: 100, power: 0.9 };
        assert_eq!(s.lr(0), 0.1);
        assert_eq!(s.lr(100), 0.0);
        assert_eq!(s.lr(250), 0.0);
        let lin = PolySchedule { power: 1.0, ..s };
        assert!((lin.lr(50) - 0.05).abs() < 1e-15);
        assert!((1..=100).all(|i| s.lr(i) <= s.lr(i - 1)));
    }
}
