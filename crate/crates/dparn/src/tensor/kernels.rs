//! Raw numeric loops shared by the tape's forward and backward passes.
//!
//! Convolution index convention (single instance, channels-first `[C, F, T]`):
//! frequency may be padded ("same", left-biased) or not ("valid"); time is
//! always padded with `kT - 1` zeros strictly in the past, so outputs never
//! read future frames. The transposed convolution is the exact adjoint of
//! the forward convolution along frequency and uses the same causal window
//! in time.

use super::Scalar;

/// out[M,N] = a[M,K] * b[K,N]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for row in 0..m {
        let out_row = &mut out[row * n..(row + 1) * n];
        for (kk, &aval) in a[row * k..(row + 1) * k].iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += aval * bv;
            }
        }
    }
}

/// out[M,N] = a[M,K] * b[N,K]^T
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for row in 0..m {
        let a_row = &a[row * k..(row + 1) * k];
        for col in 0..n {
            let b_row = &b[col * k..(col + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            out[row * n + col] += acc;
        }
    }
}

/// out[M,N] = a[K,M]^T * b[K,N]
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (row, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[row * n..(row + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose<T: Scalar>(a: &[T], out: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// Frequency padding mode of a convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreqPad {
    /// Output extent = ceil(F / stride); zero pad split symmetrically,
    /// extra zero on the left when the total is odd.
    Same,
    /// No padding; output extent = (F - kF) / stride + 1.
    Valid,
}

impl FreqPad {
    /// (pad_left, output_extent) for input extent `f`, kernel `kf`, stride `s`.
    pub fn resolve(self, f: usize, kf: usize, s: usize) -> (usize, usize) {
        match self {
            FreqPad::Same => {
                let out = f.div_ceil(s);
                let total = ((out - 1) * s + kf).saturating_sub(f);
                let left = total.div_ceil(2);
                (left, out)
            }
            FreqPad::Valid => (0, (f - kf) / s + 1),
        }
    }
}

/// Geometry of one conv2d application, fully resolved.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub f_in: usize,
    pub f_out: usize,
    pub t_len: usize,
    pub kf: usize,
    pub kt: usize,
    pub stride_f: usize,
    pub pad_f_left: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        f_in: usize,
        t_len: usize,
        kf: usize,
        kt: usize,
        stride_f: usize,
        pad: FreqPad,
    ) -> Self {
        let (pad_f_left, f_out) = pad.resolve(f_in, kf, stride_f);
        ConvGeom {
            c_in,
            c_out,
            f_in,
            f_out,
            t_len,
            kf,
            kt,
            stride_f,
            pad_f_left,
        }
    }
}

/// x[Cin,F,T] * w[Cout,Cin,kF,kT] -> out[Cout,F',T]; causal in time.
pub fn conv2d_fwd<T: Scalar>(x: &[T], w: &[T], out: &mut [T], g: &ConvGeom) {
    let (f, t_len) = (g.f_in, g.t_len);
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let w_base = ((co * g.c_in) + ci) * g.kf * g.kt;
            let x_base = ci * f * t_len;
            for fo in 0..g.f_out {
                let fi0 = (fo * g.stride_f) as isize - g.pad_f_left as isize;
                for kf in 0..g.kf {
                    let fi = fi0 + kf as isize;
                    if fi < 0 || fi >= f as isize {
                        continue;
                    }
                    let x_row =
                        &x[x_base + fi as usize * t_len..x_base + (fi as usize + 1) * t_len];
                    let out_row =
                        &mut out[(co * g.f_out + fo) * t_len..(co * g.f_out + fo + 1) * t_len];
                    for kt in 0..g.kt {
                        let wv = w[w_base + kf * g.kt + kt];
                        // input time = to + kt - (kT-1): strictly past-only window
                        let shift = g.kt - 1 - kt;
                        for to in shift..t_len {
                            out_row[to] += wv * x_row[to - shift];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of conv2d_fwd w.r.t. its input: the exact adjoint (anti-causal
/// in time). dy[Cout,F',T] -> dx[Cin,F,T].
pub fn conv2d_input_grad<T: Scalar>(dy: &[T], w: &[T], dx: &mut [T], g: &ConvGeom) {
    let (f, t_len) = (g.f_in, g.t_len);
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let w_base = ((co * g.c_in) + ci) * g.kf * g.kt;
            let dx_base = ci * f * t_len;
            for fo in 0..g.f_out {
                let fi0 = (fo * g.stride_f) as isize - g.pad_f_left as isize;
                for kf in 0..g.kf {
                    let fi = fi0 + kf as isize;
                    if fi < 0 || fi >= f as isize {
                        continue;
                    }
                    let dy_row = &dy[(co * g.f_out + fo) * t_len..(co * g.f_out + fo + 1) * t_len];
                    let dx_row =
                        &mut dx[dx_base + fi as usize * t_len..dx_base + (fi as usize + 1) * t_len];
                    for kt in 0..g.kt {
                        let wv = w[w_base + kf * g.kt + kt];
                        let shift = g.kt - 1 - kt;
                        for to in shift..t_len {
                            dx_row[to - shift] += wv * dy_row[to];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of conv2d_fwd w.r.t. its weights. dw[Cout,Cin,kF,kT].
pub fn conv2d_weight_grad<T: Scalar>(x: &[T], dy: &[T], dw: &mut [T], g: &ConvGeom) {
    let (f, t_len) = (g.f_in, g.t_len);
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let w_base = ((co * g.c_in) + ci) * g.kf * g.kt;
            let x_base = ci * f * t_len;
            for fo in 0..g.f_out {
                let fi0 = (fo * g.stride_f) as isize - g.pad_f_left as isize;
                for kf in 0..g.kf {
                    let fi = fi0 + kf as isize;
                    if fi < 0 || fi >= f as isize {
                        continue;
                    }
                    let x_row =
                        &x[x_base + fi as usize * t_len..x_base + (fi as usize + 1) * t_len];
                    let dy_row = &dy[(co * g.f_out + fo) * t_len..(co * g.f_out + fo + 1) * t_len];
                    for kt in 0..g.kt {
                        let shift = g.kt - 1 - kt;
                        let mut acc = T::ZERO;
                        for to in shift..t_len {
                            acc += dy_row[to] * x_row[to - shift];
                        }
                        dw[w_base + kf * g.kt + kt] += acc;
                    }
                }
            }
        }
    }
}

/// Transposed convolution, the decoder building block.
///
/// y[Cin,F',T] * w[Cin,Cout,kF,kT] -> out[Cout,F,T] where the geometry `g`
/// is that of the mirrored forward convolution (g.c_in/f_in describe the
/// OUTPUT side here, g.c_out/f_out the input side). Frequency is the exact
/// adjoint of conv2d_fwd; time keeps the causal window `to in [ti-kT+1, ti]`,
/// so ⟨conv2d(x), y⟩ = ⟨x, rev_t(conv2d_transpose(rev_t(y)))⟩ and the plain
/// adjoint identity holds whenever kT = 1.
pub fn conv2d_transpose_fwd<T: Scalar>(y: &[T], w: &[T], out: &mut [T], g: &ConvGeom) {
    let (f, t_len) = (g.f_in, g.t_len);
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            // weight layout [Cin_of_transposed = g.c_out][Cout_of_transposed = g.c_in][kf][kt]
            let w_base = ((co * g.c_in) + ci) * g.kf * g.kt;
            let out_base = ci * f * t_len;
            for fo in 0..g.f_out {
                let fi0 = (fo * g.stride_f) as isize - g.pad_f_left as isize;
                for kf in 0..g.kf {
                    let fi = fi0 + kf as isize;
                    if fi < 0 || fi >= f as isize {
                        continue;
                    }
                    let y_row = &y[(co * g.f_out + fo) * t_len..(co * g.f_out + fo + 1) * t_len];
                    let out_row = &mut out
                        [out_base + fi as usize * t_len..out_base + (fi as usize + 1) * t_len];
                    for kt in 0..g.kt {
                        let wv = w[w_base + kf * g.kt + kt];
                        // output time ti reads y at to = ti - (kT-1) + kt <= ti
                        let shift = g.kt - 1 - kt;
                        for ti in shift..t_len {
                            out_row[ti] += wv * y_row[ti - shift];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of conv2d_transpose_fwd w.r.t. its input y.
pub fn conv2d_transpose_input_grad<T: Scalar>(dout: &[T], w: &[T], dy: &mut [T], g: &ConvGeom) {
    let (f, t_len) = (g.f_in, g.t_len);
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let w_base = ((co * g.c_in) + ci) * g.kf * g.kt;
            let dout_base = ci * f * t_len;
            for fo in 0..g.f_out {
                let fi0 = (fo * g.stride_f) as isize - g.pad_f_left as isize;
                for kf in 0..g.kf {
                    let fi = fi0 + kf as isize;
                    if fi < 0 || fi >= f as isize {
                        continue;
                    }
                    let dout_row = &dout
                        [dout_base + fi as usize * t_len..dout_base + (fi as usize + 1) * t_len];
                    let dy_row =
                        &mut dy[(co * g.f_out + fo) * t_len..(co * g.f_out + fo + 1) * t_len];
                    for kt in 0..g.kt {
                        let wv = w[w_base + kf * g.kt + kt];
                        let shift = g.kt - 1 - kt;
                        for ti in shift..t_len {
                            dy_row[ti - shift] += wv * dout_row[ti];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of conv2d_transpose_fwd w.r.t. its weights.
pub fn conv2d_transpose_weight_grad<T: Scalar>(y: &[T], dout: &[T], dw: &mut [T], g: &ConvGeom) {
    let (f, t_len) = (g.f_in, g.t_len);
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let w_base = ((co * g.c_in) + ci) * g.kf * g.kt;
            let dout_base = ci * f * t_len;
            for fo in 0..g.f_out {
                let fi0 = (fo * g.stride_f) as isize - g.pad_f_left as isize;
                for kf in 0..g.kf {
                    let fi = fi0 + kf as isize;
                    if fi < 0 || fi >= f as isize {
                        continue;
                    }
                    let y_row = &y[(co * g.f_out + fo) * t_len..(co * g.f_out + fo + 1) * t_len];
                    let dout_row = &dout
                        [dout_base + fi as usize * t_len..dout_base + (fi as usize + 1) * t_len];
                    for kt in 0..g.kt {
                        let shift = g.kt - 1 - kt;
                        let mut acc = T::ZERO;
                        for ti in shift..t_len {
                            acc += dout_row[ti] * y_row[ti - shift];
                        }
                        dw[w_base + kf * g.kt + kt] += acc;
                    }
                }
            }
        }
    }
}

/// Numerically stabilized softmax over contiguous rows of length `n`.
pub fn softmax_rows<T: Scalar>(x: &[T], out: &mut [T], n: usize) {
    for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mut mx = xr[0];
        for &v in xr {
            mx = mx.max(v);
        }
        let mut sum = T::ZERO;
        for (o, &v) in or.iter_mut().zip(xr.iter()) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in or.iter_mut() {
            *o = *o / sum;
        }
    }
}

/// Backward of softmax_rows given the forward output.
pub fn softmax_rows_grad<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T], n: usize) {
    for ((yr, dyr), dxr) in y
        .chunks_exact(n)
        .zip(dy.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let mut dot = T::ZERO;
        for (&yv, &dv) in yr.iter().zip(dyr.iter()) {
            dot += yv * dv;
        }
        for ((d, &yv), &dv) in dxr.iter_mut().zip(yr.iter()).zip(dyr.iter()) {
            *d += yv * (dv - dot);
        }
    }
}
