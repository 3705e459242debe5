//! Desk-scale training loop: one clip, full-clip batches, deterministic.

use rustfft::FftNum;

use super::adam::{clip_global_norm, AdamConfig, AdamState};
use super::loss::{spectral_loss, LossConfig};
use super::schedule::LrSchedule;
use crate::dsp::{mix_at_snr, stft, StftConfig};
use crate::error::{DparnError, Result};
use crate::model::DparnModel;
use crate::tensor::tape::Tape;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub stft: StftConfig,
    pub snr_db: f64,
    pub steps: usize,
    /// Global L2 gradient clip.
    pub grad_clip: f64,
}

impl TrainConfig {
    /// Configuration for overfitting one short clip with the reduced model:
    /// the schedule constant follows the reduced channel count and the
    /// warm-up is short enough to reach useful rates within 500 steps.
    pub fn toy(channels: usize, steps: usize, snr_db: f64) -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            schedule: LrSchedule {
                dim_constant: channels as f64,
                warmup_steps: 125,
            },
            adam: AdamConfig::default(),
            stft: StftConfig::default(),
            snr_db,
            steps,
            grad_clip: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepTrace {
    pub step: usize,
    pub lr: f64,
    pub loss_ri: f64,
    pub loss_mag: f64,
    pub total: f64,
}

/// Mix the clips at the configured SNR, transform, and optimize the
/// spectral loss. Returns the per-step trace; the model is updated in
/// place. Deterministic: identical inputs give bit-identical traces.
pub fn train_toy<T: Scalar + FftNum>(
    model: &mut DparnModel<T>,
    clean: &[T],
    noise: &[T],
    cfg: &TrainConfig,
) -> Result<Vec<StepTrace>> {
    let min_len = crate::dsp::SAMPLE_RATE as usize;
    if clean.len() < min_len {
        return Err(DparnError::Config(format!(
            "training clip too short: {} samples, need at least {min_len} (1 s at 48 kHz)",
            clean.len()
        )));
    }
    let mix = mix_at_snr(clean, noise, cfg.snr_db, true)?;
    let noisy_spec = stft(&mix.mixture, &cfg.stft)?;
    let clean_spec = stft(&mix.clean_ref, &cfg.stft)?;
    let clean_re = clean_spec.re_tensor();
    let clean_im = clean_spec.im_tensor();

    let mut adam = AdamState::new(&model.params, cfg.adam);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut tape = Tape::new();
        let binds = model.bind(&mut tape, true);
        let out = model.forward_on_tape(&mut tape, &binds, &noisy_spec, true)?;
        let r_re = tape.constant(clean_re.clone());
        let r_im = tape.constant(clean_im.clone());
        let parts = spectral_loss(&mut tape, out.re, out.im, r_re, r_im, &cfg.loss)?;
        let total = tape.value(parts.total).data()[0].to_f64();
        if !total.is_finite() {
            return Err(DparnError::Divergence {
                step,
                what: format!("loss became {total}"),
            });
        }
        let loss_ri = tape.value(parts.ri).data()[0].to_f64();
        let loss_mag = tape.value(parts.mag).data()[0].to_f64();
        tape.backward(parts.total)?;

        let mut grads: Vec<Option<Tensor<T>>> = model
            .params
            .iter()
            .map(|(id, _)| tape.grad(binds[id]))
            .collect();
        clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = cfg.schedule.lr_at_step(step)?;
        adam.step(&mut model.params, &grads, lr)?;
        model.update_running_stats(&tape, &out.bn_nodes);

        trace.push(StepTrace {
            step,
            lr,
            loss_ri,
            loss_mag,
            total,
        });
    }
    Ok(trace)
}

/// Loss trace as CSV: step, lr, loss_ri, loss_mag, total.
pub fn write_loss_csv(trace: &[StepTrace], mut sink: impl std::io::Write) -> Result<()> {
    writeln!(sink, "step,lr,loss_ri,loss_mag,total")?;
    for t in trace {
        writeln!(
            sink,
            "{},{:e},{:e},{:e},{:e}",
            t.step, t.lr, t.loss_ri, t.loss_mag, t.total
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::Rng;

    fn toy_audio(seed: u64, secs: f64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = Rng::new(seed);
        let n = (secs * crate::dsp::SAMPLE_RATE as f64) as usize;
        let clean: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / crate::dsp::SAMPLE_RATE as f64;
                0.4 * (2.0 * std::f64::consts::PI * 220.0 * t).sin()
                    + 0.2 * (2.0 * std::f64::consts::PI * 1760.0 * t).sin()
            })
            .collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.uniform_symmetric(0.3)).collect();
        (clean, noise)
    }

    #[test]
    fn zero_steps_leaves_weights_at_initialization() {
        let mut model = DparnModel::<f64>::new(ModelConfig::reduced(), 77).unwrap();
        let reference = DparnModel::<f64>::new(ModelConfig::reduced(), 77).unwrap();
        let (clean, noise) = toy_audio(1, 1.0);
        let cfg = TrainConfig::toy(16, 0, 5.0);
        let trace = train_toy(&mut model, &clean, &noise, &cfg).unwrap();
        assert!(trace.is_empty());
        for ((_, a), (_, b)) in model.params.iter().zip(reference.params.iter()) {
            assert!(a
                .value
                .data()
                .iter()
                .zip(b.value.data().iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let (clean, noise) = toy_audio(2, 1.0);
        let cfg = TrainConfig::toy(16, 3, 5.0);
        let run = || {
            let mut model = DparnModel::<f64>::new(ModelConfig::reduced(), 123).unwrap();
            train_toy(&mut model, &clean, &noise, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
            assert_eq!(x.loss_ri.to_bits(), y.loss_ri.to_bits());
            assert_eq!(x.lr.to_bits(), y.lr.to_bits());
        }
    }

    #[test]
    fn frozen_low_band_is_bit_identical_after_training() {
        let mut model = DparnModel::<f64>::new(ModelConfig::reduced(), 5).unwrap();
        let before = model.params.get(model.scm_low_id()).value.data().to_vec();
        let (clean, noise) = toy_audio(3, 1.0);
        let cfg = TrainConfig::toy(16, 3, 5.0);
        train_toy(&mut model, &clean, &noise, &cfg).unwrap();
        let after = model.params.get(model.scm_low_id()).value.data();
        assert!(before
            .iter()
            .zip(after.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        // and the trainable high band did move
        let high = model.params.get(model.scm_high_id());
        let fresh = DparnModel::<f64>::new(ModelConfig::reduced(), 5).unwrap();
        let high_before = fresh.params.get(fresh.scm_high_id());
        assert!(high
            .value
            .data()
            .iter()
            .zip(high_before.value.data().iter())
            .any(|(a, b)| a != b));
    }

    #[test]
    fn too_short_clip_is_a_config_error() {
        let mut model = DparnModel::<f64>::new(ModelConfig::reduced(), 5).unwrap();
        let clean = vec![0.1f64; 1000];
        let noise = vec![0.1f64; 1000];
        let cfg = TrainConfig::toy(16, 1, 5.0);
        assert!(matches!(
            train_toy(&mut model, &clean, &noise, &cfg),
            Err(DparnError::Config(_))
        ));
    }

    #[test]
    fn non_finite_input_aborts_with_step_index() {
        let mut model = DparnModel::<f64>::new(ModelConfig::reduced(), 5).unwrap();
        let (mut clean, noise) = toy_audio(4, 1.0);
        clean[100] = f64::NAN;
        let cfg = TrainConfig::toy(16, 2, 5.0);
        match train_toy(&mut model, &clean, &noise, &cfg) {
            Err(DparnError::Divergence { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn csv_trace_has_header_and_rows() {
        let trace = vec![StepTrace {
            step: 1,
            lr: 1e-3,
            loss_ri: 2.0,
            loss_mag: 1.0,
            total: 3.0,
        }];
        let mut out = Vec::new();
        write_loss_csv(&trace, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,lr,loss_ri,loss_mag,total");
        assert!(lines[1].starts_with("1,"));
    }
}
