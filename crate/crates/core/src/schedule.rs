//! Linear warm-up followed by step decay.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
    /// Steps at which the rate is multiplied by `decay`.
    pub milestones: Vec<u64>,
    pub decay: f64,
    /// Lower bound applied after decay, if any.
    pub floor: Option<f64>,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            warmup: 0,
            milestones: Vec::new(),
            decay: 0.5,
            floor: None,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.base * step as f64 / self.warmup as f64;
        }
        let k = self.milestones.iter().filter(|&&m| m <= step).count();
        let lr = self.base * self.decay.powi(k as i32);
        match self.floor {
            Some(f) => lr.max(f),
            None => lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn crosstask() -> LrSchedule {
        LrSchedule {
            base: 5e-4,
            warmup: 4000,
            milestones: vec![10_000, 16_000, 22_000],
            decay: 0.5,
            floor: None,
        }
    }

    #[test]
    fn warmup_and_decay_profile() {
        let s = crosstask();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(4000), 5e-4);
        assert_eq!(s.lr_at(2000), 2.5e-4);
        assert_eq!(s.lr_at(17_000), 5e-4 * 0.25);
        assert_eq!(s.lr_at(30_000), 5e-4 * 0.125);
        let floored = LrSchedule {
            floor: Some(1e-4),
            ..crosstask()
        };
        assert_eq!(floored.lr_at(30_000), 1e-4);
        assert_eq!(LrSchedule::constant(0.1).lr_at(0), 0.1);
    }

    proptest! {
        #[test]
        fn rate_never_exceeds_base_and_is_monotone_after_warmup(a in 4000u64..40_000, b in 4000u64..40_000) {
            let s = crosstask();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(s.lr_at(hi) <= s.lr_at(lo));
            prop_assert!(s.lr_at(lo) <= s.base);
        }
    }
}
