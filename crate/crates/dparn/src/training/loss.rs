//! Power-compressed complex spectral loss.
//!
//! Magnitudes are raised to a compression exponent with phase preserved;
//! the loss is the squared Frobenius distance of the compressed real and
//! imaginary planes plus the squared distance of the compressed magnitudes.
//! A spectral floor removes the non-Lipschitz point at zero magnitude:
//! bins below the floor contribute no gradient, and exact zeros compress
//! to exact zeros.

use crate::error::{dim_err, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Compression exponent, 0 < gamma <= 1.
    pub gamma: f64,
    /// Magnitude floor for compression and phase extraction.
    pub eps_mag: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0 / 3.0,
            eps_mag: 1e-9,
        }
    }
}

/// Compress one complex bin: |s|^gamma with the phase kept. Zero maps to
/// zero (the floored magnitude only ever multiplies a zero numerator).
pub fn power_compress(re: f64, im: f64, cfg: &LossConfig) -> (f64, f64) {
    let mag = (re * re + im * im).sqrt().max(cfg.eps_mag);
    let factor = mag.powf(cfg.gamma - 1.0);
    (re * factor, im * factor)
}

/// Squared Frobenius distance of the power-compressed planes (scalar loop;
/// the non-graph reference path).
pub fn loss_ri_plain<T: Scalar>(
    est: (&[T], &[T]),
    reference: (&[T], &[T]),
    cfg: &LossConfig,
) -> Result<f64> {
    if est.0.len() != reference.0.len() || est.1.len() != reference.1.len() {
        return dim_err("loss_ri", &[est.0.len()], &[reference.0.len()]);
    }
    let mut acc = 0.0;
    for i in 0..est.0.len() {
        let (er, ei) = power_compress(est.0[i].to_f64(), est.1[i].to_f64(), cfg);
        let (rr, ri) = power_compress(reference.0[i].to_f64(), reference.1[i].to_f64(), cfg);
        acc += (er - rr) * (er - rr) + (ei - ri) * (ei - ri);
    }
    Ok(acc)
}

/// Squared Frobenius distance of the compressed magnitudes.
pub fn loss_mag_plain<T: Scalar>(
    est: (&[T], &[T]),
    reference: (&[T], &[T]),
    cfg: &LossConfig,
) -> Result<f64> {
    if est.0.len() != reference.0.len() {
        return dim_err("loss_mag", &[est.0.len()], &[reference.0.len()]);
    }
    let mut acc = 0.0;
    for i in 0..est.0.len() {
        let me = (est.0[i].to_f64().powi(2) + est.1[i].to_f64().powi(2))
            .sqrt()
            .max(cfg.eps_mag)
            .powf(cfg.gamma);
        let mr = (reference.0[i].to_f64().powi(2) + reference.1[i].to_f64().powi(2))
            .sqrt()
            .max(cfg.eps_mag)
            .powf(cfg.gamma);
        acc += (me - mr) * (me - mr);
    }
    Ok(acc)
}

/// The three loss terms as graph nodes.
pub struct LossParts {
    pub ri: Var,
    pub mag: Var,
    pub total: Var,
}

/// Floored magnitude and the compressed planes of one spectrogram on the
/// tape. Returns (compressed_re, compressed_im, magnitude^gamma).
fn compress_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    re: Var,
    im: Var,
    cfg: &LossConfig,
) -> Result<(Var, Var, Var)> {
    let re2 = tape.mul(re, re)?;
    let im2 = tape.mul(im, im)?;
    let m2 = tape.add(re2, im2)?;
    // clamp the squared magnitude: below the floor the branch is constant,
    // so no gradient reaches the singular point
    let m2c = tape.clamp_min(m2, T::from_f64(cfg.eps_mag * cfg.eps_mag));
    let m = tape.sqrt(m2c);
    let factor = tape.pow_const(m, T::from_f64(cfg.gamma - 1.0));
    let c_re = tape.mul(re, factor)?;
    let c_im = tape.mul(im, factor)?;
    let m_gamma = tape.pow_const(m, T::from_f64(cfg.gamma));
    Ok((c_re, c_im, m_gamma))
}

fn sum_sq_diff<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.sum(sq))
}

/// Build the full spectral loss on the tape.
pub fn spectral_loss<T: Scalar>(
    tape: &mut Tape<T>,
    est_re: Var,
    est_im: Var,
    ref_re: Var,
    ref_im: Var,
    cfg: &LossConfig,
) -> Result<LossParts> {
    if tape.shape(est_re) != tape.shape(ref_re) {
        return dim_err("spectral_loss", tape.shape(est_re), tape.shape(ref_re));
    }
    let (e_re, e_im, e_mag) = compress_on_tape(tape, est_re, est_im, cfg)?;
    let (r_re, r_im, r_mag) = compress_on_tape(tape, ref_re, ref_im, cfg)?;
    let ri_re = sum_sq_diff(tape, e_re, r_re)?;
    let ri_im = sum_sq_diff(tape, e_im, r_im)?;
    let ri = tape.add(ri_re, ri_im)?;
    let mag = sum_sq_diff(tape, e_mag, r_mag)?;
    let total = tape.add(ri, mag)?;
    Ok(LossParts { ri, mag, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::gradcheck::{central_diff, rel_err, FD_STEP};
    use crate::tensor::Tensor;

    #[test]
    fn exact_power_compress_cases() {
        let cfg = LossConfig::default();
        // 8 + 0i at gamma = 2/3: 8^(2/3) = 4 (up to one ulp of powf)
        let (re, im) = power_compress(8.0, 0.0, &cfg);
        assert!((re - 4.0).abs() < 1e-12);
        assert_eq!(im, 0.0);
        // pure imaginary 27i: 27^(2/3) = 9, phase pi/2 preserved
        let (re, im) = power_compress(0.0, 27.0, &cfg);
        assert_eq!(re, 0.0);
        assert!((im - 9.0).abs() < 1e-12);
        // zero magnitude maps to (0, 0)
        let (re, im) = power_compress(0.0, 0.0, &cfg);
        assert_eq!((re, im), (0.0, 0.0));
        // gamma = 1 is the identity
        let unit = LossConfig {
            gamma: 1.0,
            eps_mag: 1e-9,
        };
        let (re, im) = power_compress(0.3, -0.4, &unit);
        assert!((re - 0.3).abs() < 1e-12 && (im + 0.4).abs() < 1e-12);
    }

    #[test]
    fn loss_ri_trivial_cases() {
        let cfg = LossConfig::default();
        let s_re = vec![0.5f64, -0.25, 0.0];
        let s_im = vec![0.1f64, 0.0, 0.75];
        let zero = loss_ri_plain((&s_re, &s_im), (&s_re, &s_im), &cfg).unwrap();
        assert_eq!(zero, 0.0);
        // S = 0, estimate has a single bin 1 + 0i: compressed 1^(2/3) = 1
        let e_re = vec![1.0f64];
        let e_im = vec![0.0f64];
        let z = vec![0.0f64];
        let one = loss_ri_plain((&e_re, &e_im), (&z, &z), &cfg).unwrap();
        assert!((one - 1.0).abs() < 1e-9);
    }

    #[test]
    fn loss_mag_ignores_phase() {
        let cfg = LossConfig::default();
        let s_re = vec![0.6f64, -0.2];
        let s_im = vec![0.3f64, 0.5];
        // rotate every bin by a fixed phase
        let phi = 1.234f64;
        let e_re: Vec<f64> = s_re
            .iter()
            .zip(s_im.iter())
            .map(|(r, i)| r * phi.cos() - i * phi.sin())
            .collect();
        let e_im: Vec<f64> = s_re
            .iter()
            .zip(s_im.iter())
            .map(|(r, i)| r * phi.sin() + i * phi.cos())
            .collect();
        let l = loss_mag_plain((&e_re, &e_im), (&s_re, &s_im), &cfg).unwrap();
        assert!(l < 1e-12, "magnitude loss should ignore rotation: {l}");
        // estimate 0 against a single bin of magnitude 8: (8^(2/3))^2 = 16
        let z = vec![0.0f64];
        let r8 = vec![8.0f64];
        let l = loss_mag_plain((&z, &z), (&r8, &z), &cfg).unwrap();
        assert!((l - 16.0).abs() < 1e-4, "{l}");
    }

    /// Independent scalar-loop oracle for the combined loss.
    fn brute_force_total(
        est: (&[f64], &[f64]),
        reference: (&[f64], &[f64]),
        cfg: &LossConfig,
    ) -> f64 {
        let mut acc = 0.0;
        for i in 0..est.0.len() {
            let me = (est.0[i] * est.0[i] + est.1[i] * est.1[i])
                .sqrt()
                .max(cfg.eps_mag);
            let mr = (reference.0[i] * reference.0[i] + reference.1[i] * reference.1[i])
                .sqrt()
                .max(cfg.eps_mag);
            let (ter, tei) = (est.0[i] / me, est.1[i] / me);
            let (trr, tri) = (reference.0[i] / mr, reference.1[i] / mr);
            let (pe, pr) = (me.powf(cfg.gamma), mr.powf(cfg.gamma));
            acc += (pe * ter - pr * trr).powi(2);
            acc += (pe * tei - pr * tri).powi(2);
            acc += (pe - pr).powi(2);
        }
        acc
    }

    #[test]
    fn tape_loss_matches_scalar_loop_oracle() {
        let mut rng = Rng::new(50);
        let cfg = LossConfig::default();
        let n = 64;
        let gen =
            |rng: &mut Rng| -> Vec<f64> { (0..n).map(|_| rng.uniform_symmetric(1.0)).collect() };
        let (er, ei, rr, ri) = (gen(&mut rng), gen(&mut rng), gen(&mut rng), gen(&mut rng));
        let expected = brute_force_total((&er, &ei), (&rr, &ri), &cfg);

        let mut tape = Tape::<f64>::new();
        let e_re = tape.constant(Tensor::from_vec(vec![n], er.clone()).unwrap());
        let e_im = tape.constant(Tensor::from_vec(vec![n], ei.clone()).unwrap());
        let r_re = tape.constant(Tensor::from_vec(vec![n], rr.clone()).unwrap());
        let r_im = tape.constant(Tensor::from_vec(vec![n], ri.clone()).unwrap());
        let parts = spectral_loss(&mut tape, e_re, e_im, r_re, r_im, &cfg).unwrap();
        let got = tape.value(parts.total).data()[0];
        assert!(
            (got - expected).abs() / expected.abs() < 1e-6,
            "{got} vs {expected}"
        );
        // both plain components agree as well, and the total is their sum
        let ri_plain = loss_ri_plain((&er[..], &ei[..]), (&rr[..], &ri[..]), &cfg).unwrap();
        let mag_plain = loss_mag_plain((&er[..], &ei[..]), (&rr[..], &ri[..]), &cfg).unwrap();
        assert!((tape.value(parts.ri).data()[0] - ri_plain).abs() < 1e-9);
        assert!((tape.value(parts.mag).data()[0] - mag_plain).abs() < 1e-9);
        assert!(
            (got - (ri_plain + mag_plain)).abs() < 1e-9,
            "total differs from the sum of its parts"
        );
    }

    #[test]
    fn loss_gradient_matches_finite_differences_away_from_zero_bins() {
        let mut rng = Rng::new(51);
        let cfg = LossConfig::default();
        let n = 24;
        // keep every magnitude well above the exclusion threshold
        let gen = |rng: &mut Rng| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let v = rng.uniform_symmetric(1.0);
                    v.signum() * (v.abs() + 0.05)
                })
                .collect()
        };
        let (er, ei, rr, ri_v) = (gen(&mut rng), gen(&mut rng), gen(&mut rng), gen(&mut rng));
        let est_re_t = Tensor::from_vec(vec![n], er).unwrap();
        let est_im_t = Tensor::from_vec(vec![n], ei).unwrap();

        let run = |re_probe: &Tensor<f64>, im_probe: &Tensor<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let e_re = tape.constant(re_probe.clone());
            let e_im = tape.constant(im_probe.clone());
            let r_re = tape.constant(Tensor::from_vec(vec![n], rr.clone()).unwrap());
            let r_im = tape.constant(Tensor::from_vec(vec![n], ri_v.clone()).unwrap());
            let parts = spectral_loss(&mut tape, e_re, e_im, r_re, r_im, &cfg).unwrap();
            tape.value(parts.total).data()[0]
        };

        let mut tape = Tape::<f64>::new();
        let e_re = tape.leaf(est_re_t.clone(), true);
        let e_im = tape.leaf(est_im_t.clone(), true);
        let r_re = tape.constant(Tensor::from_vec(vec![n], rr.clone()).unwrap());
        let r_im = tape.constant(Tensor::from_vec(vec![n], ri_v.clone()).unwrap());
        let parts = spectral_loss(&mut tape, e_re, e_im, r_re, r_im, &cfg).unwrap();
        tape.backward(parts.total).unwrap();
        let g_re = tape.grad(e_re).unwrap();
        let g_im = tape.grad(e_im).unwrap();

        // exclusion contract: all probed bins are far from the singular point
        for i in 0..n {
            let mag = (est_re_t.data()[i].powi(2) + est_im_t.data()[i].powi(2)).sqrt();
            assert!(mag >= 1e-6, "test construction violated the exclusion");
        }
        for i in 0..n {
            let f_re = |probe: &Tensor<f64>| run(probe, &est_im_t);
            let numeric = central_diff(&f_re, &est_re_t, i, FD_STEP);
            assert!(
                rel_err(g_re.data()[i], numeric) <= 1e-4,
                "re bin {i}: {} vs {numeric}",
                g_re.data()[i]
            );
            let f_im = |probe: &Tensor<f64>| run(&est_re_t, probe);
            let numeric = central_diff(&f_im, &est_im_t, i, FD_STEP);
            assert!(rel_err(g_im.data()[i], numeric) <= 1e-4);
        }
    }

    #[test]
    fn zero_magnitude_bins_yield_finite_gradients() {
        let cfg = LossConfig::default();
        let mut tape = Tape::<f64>::new();
        let e_re = tape.leaf(Tensor::from_vec(vec![2], vec![0.0, 0.5]).unwrap(), true);
        let e_im = tape.leaf(Tensor::from_vec(vec![2], vec![0.0, 0.1]).unwrap(), true);
        let r_re = tape.constant(Tensor::from_vec(vec![2], vec![0.3, 0.2]).unwrap());
        let r_im = tape.constant(Tensor::from_vec(vec![2], vec![0.1, -0.2]).unwrap());
        let parts = spectral_loss(&mut tape, e_re, e_im, r_re, r_im, &cfg).unwrap();
        tape.backward(parts.total).unwrap();
        let g = tape.grad(e_re).unwrap();
        assert!(g.data()[0].is_finite());
        assert!(g.data()[1].is_finite());
    }
}
