//! Runtime verification suites surfaced by the `verify` subcommand: the
//! compression-matrix invariants, STFT round-trip quality, and a
//! finite-difference gradient check of the full training loss on the
//! reduced model.

use crate::dsp::{istft, stft, ComplexSpectrogram, StftConfig, BIN_HZ};
use crate::error::Result;
use crate::model::{DparnModel, ModelConfig};
use crate::rng::Rng;
use crate::scm::{unwarp, warp, KNEE_HZ, NYQUIST_HZ};
use crate::tensor::gradcheck::{central_diff, rel_err_with_floor, FD_STEP};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use crate::training::{spectral_loss, LossConfig};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Invariants of an assembled compression matrix (`compressed x f_bins`,
/// identity over the first `low_band` rows).
pub fn scm_suite(w: &[f64], f_bins: usize, compressed: usize, low_band: usize) -> Vec<CheckResult> {
    let mut out = Vec::new();

    let warp_knee = warp(KNEE_HZ).unwrap();
    out.push(CheckResult::new(
        "scm.warp_knee_identity",
        warp_knee == KNEE_HZ,
        format!("warp(5000) = {warp_knee}"),
    ));
    let warp_top = warp(NYQUIST_HZ).unwrap();
    out.push(CheckResult::new(
        "scm.warp_nyquist",
        (warp_top - 10379.41).abs() < 0.01,
        format!("warp(24000) = {warp_top}"),
    ));

    let mut worst_rt = 0.0f64;
    let mut f = 0.0;
    while f <= NYQUIST_HZ {
        let rt = unwarp(warp(f).unwrap()).unwrap();
        worst_rt = worst_rt.max((rt - f).abs());
        f += 1.0;
    }
    out.push(CheckResult::new(
        "scm.unwarp_warp_identity_1hz_grid",
        worst_rt < 1e-6,
        format!("worst |unwarp(warp(f)) - f| = {worst_rt:.3e} Hz"),
    ));

    let mut identity_ok = true;
    let mut detail = "identity rows exact".to_string();
    'rows: for k in 0..low_band {
        for m in 0..f_bins {
            let expect = if m == k { 1.0 } else { 0.0 };
            if w[k * f_bins + m] != expect {
                identity_ok = false;
                detail = format!("row {k} violates the identity block at column {m}");
                break 'rows;
            }
        }
    }
    out.push(CheckResult::new(
        "scm.low_band_identity",
        identity_ok,
        detail,
    ));

    // complementary crossings in the high band: on any bin where exactly
    // two consecutive filters are nonzero, they sum to one
    let mut worst_sum = 0.0f64;
    let mut checked = 0usize;
    for k in low_band..compressed - 1 {
        for m in 0..f_bins {
            let a = w[k * f_bins + m];
            let b = w[(k + 1) * f_bins + m];
            if a > 0.0 && b > 0.0 {
                worst_sum = worst_sum.max((a + b - 1.0).abs());
                checked += 1;
            }
        }
    }
    out.push(CheckResult::new(
        "scm.adjacent_filter_partition",
        checked > 0 && worst_sum < 1e-9,
        format!("{checked} shared bins, worst |g_k + g_k+1 - 1| = {worst_sum:.3e}"),
    ));
    out
}

/// STFT analysis/synthesis invariants.
pub fn stft_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let cfg = StftConfig::default();
    let mut rng = Rng::new(seed);
    let n = crate::dsp::SAMPLE_RATE as usize;

    let noise64: Vec<f64> = (0..n).map(|_| rng.uniform_symmetric(0.8)).collect();
    let snr64 = match stft(&noise64, &cfg).and_then(|s| istft(&s, &cfg)) {
        Ok(back) => crate::dsp::stft::reconstruction_snr(&noise64, &back, cfg.window_len),
        Err(_) => f64::NEG_INFINITY,
    };
    out.push(CheckResult::new(
        "stft.round_trip_snr_f64",
        snr64 >= 120.0,
        format!("interior SNR {snr64:.1} dB (need >= 120)"),
    ));

    let noise32: Vec<f32> = noise64.iter().map(|&v| v as f32).collect();
    let snr32 = match stft(&noise32, &cfg).and_then(|s| istft(&s, &cfg)) {
        Ok(back) => crate::dsp::stft::reconstruction_snr(&noise32, &back, cfg.window_len),
        Err(_) => f64::NEG_INFINITY,
    };
    out.push(CheckResult::new(
        "stft.round_trip_snr_f32",
        snr32 >= 60.0,
        format!("interior SNR {snr32:.1} dB (need >= 60)"),
    ));

    let window = crate::dsp::stft::hann_periodic::<f64>(cfg.window_len);
    let worst_cola = (0..cfg.hop)
        .map(|i| (window[i] + window[i + cfg.hop] - 1.0).abs())
        .fold(0.0f64, f64::max)
        .max((cfg.window_len % cfg.hop) as f64);
    out.push(CheckResult::new(
        "stft.hann_cola_at_half_overlap",
        worst_cola < 1e-12,
        format!("worst |w[n] + w[n+hop] - 1| = {worst_cola:.3e}"),
    ));

    let tone_bin = (1000.0 / BIN_HZ) as usize;
    let tone: Vec<f64> = (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / n as f64).sin())
        .collect();
    let spec = stft(&tone, &cfg).expect("stft");
    let t = spec.frames / 2;
    let peak_bin = (0..spec.bins)
        .max_by(|&a, &b| {
            spec.magnitude(t, a)
                .partial_cmp(&spec.magnitude(t, b))
                .unwrap()
        })
        .unwrap();
    out.push(CheckResult::new(
        "stft.tone_peak_bin",
        peak_bin == tone_bin,
        format!("1 kHz tone peaks at bin {peak_bin} (expect {tone_bin})"),
    ));
    out
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub sampled: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Finite-difference check of the full spectral-loss gradient through the
/// reduced model at 64-bit: at least `min_samples` scalar parameters are
/// probed with central differences, stratified over every trainable
/// tensor. Input bins are kept above the magnitude-exclusion threshold.
pub fn gradcheck_reduced_model(min_samples: usize, seed: u64) -> Result<GradcheckReport> {
    let model = DparnModel::<f64>::new(ModelConfig::reduced(), seed)?;
    let frames = 4usize;
    let bins = model.config.f_bins;
    let mut rng = Rng::new(seed ^ 0xFD);
    let gen_spec = |rng: &mut Rng| {
        let mut spec = ComplexSpectrogram::<f64>::zeros(frames, bins);
        for i in 0..frames * bins {
            // keep |S| comfortably above the 1e-6 exclusion threshold
            let re = rng.uniform_symmetric(0.8);
            let im = rng.uniform_symmetric(0.8);
            let mag = (re * re + im * im).sqrt().max(1e-12);
            let boost = (0.05 / mag).max(1.0);
            spec.re[i] = re * boost;
            spec.im[i] = im * boost;
        }
        spec
    };
    let noisy = gen_spec(&mut rng);
    let clean = gen_spec(&mut rng);
    let loss_cfg = LossConfig::default();

    let eval = |model: &DparnModel<f64>| -> f64 {
        let mut tape = Tape::new();
        let binds = model.bind(&mut tape, true);
        let out = model
            .forward_on_tape(&mut tape, &binds, &noisy, true)
            .expect("forward");
        let r_re = tape.constant(clean.re_tensor());
        let r_im = tape.constant(clean.im_tensor());
        let parts = spectral_loss(&mut tape, out.re, out.im, r_re, r_im, &loss_cfg).expect("loss");
        tape.value(parts.total).data()[0]
    };

    // analytic gradients, one backward pass
    let mut tape = Tape::new();
    let binds = model.bind(&mut tape, true);
    let out = model.forward_on_tape(&mut tape, &binds, &noisy, true)?;
    let r_re = tape.constant(clean.re_tensor());
    let r_im = tape.constant(clean.im_tensor());
    let parts = spectral_loss(&mut tape, out.re, out.im, r_re, r_im, &loss_cfg)?;
    let loss_scale = tape.value(parts.total).data()[0].abs();
    // cancellation noise of central differences at this loss magnitude,
    // with a 20x safety factor
    let noise_floor = (loss_scale * f64::EPSILON / (2.0 * FD_STEP)) * 20.0;
    tape.backward(parts.total)?;
    let analytic: Vec<Option<Tensor<f64>>> = model
        .params
        .iter()
        .map(|(id, _)| tape.grad(binds[id]))
        .collect();
    drop(tape);

    let trainable: Vec<usize> = model
        .params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let per_param = min_samples.div_ceil(trainable.len());
    let mut sampled = 0usize;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let model_cell = std::cell::RefCell::new(model);
    for &id in &trainable {
        let (name, numel, original) = {
            let m = model_cell.borrow();
            let p = m.params.get(id);
            (p.name.clone(), p.value.numel(), p.value.clone())
        };
        for _ in 0..per_param.min(numel) {
            let idx = rng.below(numel);
            let a = analytic[id].as_ref().map(|g| g.data()[idx]).unwrap_or(0.0);
            let f = |probe: &Tensor<f64>| -> f64 {
                let mut m = model_cell.borrow_mut();
                m.params.set_value(id, probe.clone());
                let v = eval(&m);
                m.params.set_value(id, original.clone());
                v
            };
            let numeric = central_diff(&f, &original, idx, FD_STEP);
            let e = rel_err_with_floor(a, numeric, noise_floor);
            sampled += 1;
            if e > max_rel {
                max_rel = e;
                worst = format!("{name}[{idx}]");
            }
        }
    }
    Ok(GradcheckReport {
        sampled,
        max_rel_err: max_rel,
        worst_param: worst,
        tolerance: 1e-4,
    })
}
