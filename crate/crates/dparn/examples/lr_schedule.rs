//! The warm-up learning-rate schedule of both training regimes.
//!
//! ```bash
//! cargo run --release --example lr_schedule
//! ```

use dparn::training::LrSchedule;

fn main() {
    for (name, schedule) in [("exp1", LrSchedule::exp1()), ("exp2", LrSchedule::exp2())] {
        let warm = schedule.warmup_steps;
        println!(
            "{name}: warm-up {} steps, dimension constant {}",
            warm, schedule.dim_constant
        );
        for step in [1, warm / 4, warm / 2, warm, 2 * warm, 4 * warm] {
            let lr = schedule.lr_at_step(step).expect("step >= 1");
            println!("  step {step:>7}: lr = {lr:.4e}");
        }
        let peak = schedule.lr_at_step(warm).unwrap();
        let before = schedule.lr_at_step(warm - 1).unwrap();
        let after = schedule.lr_at_step(warm + 1).unwrap();
        println!("  peak at the warm-up boundary: {before:.4e} < {peak:.4e} > {after:.4e}");
    }
}
