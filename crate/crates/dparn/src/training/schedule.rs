//! Warm-up learning-rate schedule: linear rise for `warmup_steps`, inverse
//! square-root decay after, scaled by one over the square root of the model
//! channel dimension.

use crate::error::{DparnError, Result};

#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    /// Model-dimension constant under the leading 1/sqrt(c); the channel
    /// count C of the dual-path block.
    pub dim_constant: f64,
    pub warmup_steps: usize,
}

impl LrSchedule {
    /// Long regime: 40000 warm-up steps.
    pub fn exp1() -> Self {
        LrSchedule {
            dim_constant: 80.0,
            warmup_steps: 40_000,
        }
    }

    /// Short regime: 5000 warm-up steps.
    pub fn exp2() -> Self {
        LrSchedule {
            dim_constant: 80.0,
            warmup_steps: 5_000,
        }
    }

    /// lr(step) = (1/sqrt(c)) * min(1/sqrt(step), step/sqrt(warmup^3)).
    /// Steps are 1-based; step 0 is a domain error.
    pub fn lr_at_step(&self, step: usize) -> Result<f64> {
        if step == 0 {
            return Err(DparnError::Domain("schedule step must be >= 1".into()));
        }
        let psi = step as f64;
        let warm = self.warmup_steps as f64;
        let rise = psi / warm.powi(3).sqrt();
        let decay = 1.0 / psi.sqrt();
        Ok((1.0 / self.dim_constant.sqrt()) * rise.min(decay))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_value_at_warmup_boundary() {
        let s = LrSchedule::exp1();
        // both branches equal 1/sqrt(warmup) at the boundary
        let peak = s.lr_at_step(40_000).unwrap();
        let expect = (1.0 / 80f64.sqrt()) * (1.0 / 200.0);
        assert!((peak - expect).abs() < 1e-12);
        assert!((peak - 5.590e-4).abs() < 1e-6);
        let rise = 40_000f64 / 40_000f64.powi(3).sqrt();
        let decay = 1.0 / 40_000f64.sqrt();
        assert!((rise - decay).abs() < 1e-15);
    }

    #[test]
    fn first_step_value() {
        let s = LrSchedule::exp1();
        let lr = s.lr_at_step(1).unwrap();
        // (1/sqrt(80)) * 1/sqrt(40000^3) = (1/sqrt(80)) * 1.25e-7
        assert!((lr - 1.3975e-8).abs() < 1e-11, "{lr}");
    }

    #[test]
    fn rises_then_decays() {
        for schedule in [LrSchedule::exp1(), LrSchedule::exp2()] {
            let warm = schedule.warmup_steps;
            let mut prev = schedule.lr_at_step(1).unwrap();
            for step in [warm / 4, warm / 2, warm] {
                let lr = schedule.lr_at_step(step).unwrap();
                assert!(lr > prev, "not rising at {step}");
                prev = lr;
            }
            for step in [2 * warm, 4 * warm, 16 * warm] {
                let lr = schedule.lr_at_step(step).unwrap();
                assert!(lr < prev, "not decaying at {step}");
                prev = lr;
            }
        }
    }

    #[test]
    fn step_zero_is_domain_error() {
        assert!(matches!(
            LrSchedule::exp1().lr_at_step(0),
            Err(DparnError::Domain(_))
        ));
    }

    #[test]
    fn both_regimes_pointwise() {
        for (schedule, warm) in [
            (LrSchedule::exp1(), 40_000f64),
            (LrSchedule::exp2(), 5_000f64),
        ] {
            let c = 80f64;
            for step in [1usize, warm as usize / 2, warm as usize, 4 * warm as usize] {
                let got = schedule.lr_at_step(step).unwrap();
                let psi = step as f64;
                let expect = (1.0 / c.sqrt()) * (1.0 / psi.sqrt()).min(psi / warm.powi(3).sqrt());
                assert!((got - expect).abs() < 1e-15);
            }
        }
    }
}
