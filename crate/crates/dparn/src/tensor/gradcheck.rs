//! Central finite-difference gradient verification at 64-bit.

use super::{Scalar, Tensor};

/// Default probe step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Absolute differences below this are FD truncation/cancellation noise
/// (eps * f / 2h for losses up to ~1e3 at the default step) and count as
/// agreement.
pub const FD_NOISE_FLOOR: f64 = 1e-8;

/// Relative error between an analytic and a numeric derivative, with an
/// absolute floor so that differences beneath the finite-difference noise
/// floor compare as equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_with_floor(analytic, numeric, FD_NOISE_FLOOR)
}

/// Like [`rel_err`] with an explicit noise floor. For a function of
/// magnitude `f`, central differences at step `h` carry cancellation noise
/// of about `eps * f / (2h)`; callers probing large losses should pass a
/// floor scaled accordingly.
pub fn rel_err_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Central finite difference of `f` w.r.t. element `index` of `x`.
pub fn central_diff<T, F>(f: &F, x: &Tensor<T>, index: usize, step: f64) -> f64
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> f64,
{
    let base = x.data()[index].to_f64();
    let plus = x.with_element(index, T::from_f64(base + step));
    let minus = x.with_element(index, T::from_f64(base - step));
    (f(&plus) - f(&minus)) / (2.0 * step)
}

/// Worst relative error of `analytic` against central differences over all
/// elements of `x`.
pub fn max_rel_err<T, F>(f: &F, x: &Tensor<T>, analytic: &[T], step: f64) -> f64
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> f64,
{
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = central_diff(f, x, i, step);
        worst = worst.max(rel_err(a.to_f64(), numeric));
    }
    worst
}
