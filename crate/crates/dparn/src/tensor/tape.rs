//! Wengert tape for reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in creation
//! order (which is automatically topological) and replays it in reverse
//! to accumulate gradients. Tapes are rebuilt per forward call; there is
//! no graph reuse across steps. Node values are immutable once written;
//! only gradient buffers mutate during backward.

use std::sync::Arc;

use super::kernels::{self, ConvGeom, FreqPad};
use super::{Scalar, Tensor};
use crate::error::{dim_err, DparnError, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Batch-norm statistics source.
#[derive(Debug, Clone)]
pub enum BnMode<T: Scalar> {
    /// Normalize with statistics of the current tensor (training).
    Batch,
    /// Normalize with externally stored running statistics (inference).
    Running { mean: Arc<Vec<T>>, var: Arc<Vec<T>> },
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    MatmulNT {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
    },
    BmmNT {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Conv2dTranspose {
        y: Var,
        w: Var,
        geom: ConvGeom,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    AddBroadcast {
        x: Var,
        b: Var,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    PRelu {
        x: Var,
        slope: Var,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    SoftmaxLast {
        x: Var,
    },
    Sqrt {
        x: Var,
    },
    PowConst {
        x: Var,
        p: T,
    },
    ClampMin {
        x: Var,
        c: T,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Permute3 {
        x: Var,
        perm: [usize; 3],
    },
    Concat {
        axis: usize,
        inputs: Vec<Var>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<T>,
    },
    LstmSeq {
        x: Var,
        w: Var,
        b: Var,
        h0: Var,
        c0: Var,
        hidden: usize,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    /// Op-specific stash: batch-norm statistics, LSTM gate/cell history.
    saved: Vec<Vec<T>>,
}

/// The recording tape. One forward pass, one tape.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            saved: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn push_saved(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        saved: Vec<Vec<T>>,
    ) -> Var {
        let v = self.push(value, op, requires_grad);
        self.nodes[v.0].saved = saved;
        v
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient accumulated on `v`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.as_ref().map(|g| {
            Tensor::from_vec(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape")
        })
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Batch statistics computed by a training-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                mode: BnMode::Batch,
                ..
            } => Some((&self.nodes[v.0].saved[0], &self.nodes[v.0].saved[1])),
            _ => None,
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- operations --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err("matmul", &sa, &sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_vec(vec![m, n], out)?, Op::Matmul { a, b }, rg))
    }

    /// a[M,K] · b[N,K]ᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return dim_err("matmul_nt", &sa, &sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::ZERO; m * n];
        kernels::matmul_nt(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out)?,
            Op::MatmulNT { a, b },
            rg,
        ))
    }

    /// Batched a[B,M,K] · b[B,K,N].
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return dim_err("bmm", &sa, &sb);
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::ZERO; bsz * m * n];
        for i in 0..bsz {
            kernels::matmul(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(vec![bsz, m, n], out)?,
            Op::Bmm { a, b },
            rg,
        ))
    }

    /// Batched a[B,M,K] · b[B,N,K]ᵀ.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return dim_err("bmm_nt", &sa, &sb);
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![T::ZERO; bsz * m * n];
        for i in 0..bsz {
            kernels::matmul_nt(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(vec![bsz, m, n], out)?,
            Op::BmmNT { a, b },
            rg,
        ))
    }

    /// x[Cin,F,T] conv w[Cout,Cin,kF,kT]; frequency pad per `pad`, time
    /// strictly causal, time stride 1.
    pub fn conv2d(&mut self, x: Var, w: Var, stride_f: usize, pad: FreqPad) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return dim_err("conv2d", &sx, &sw);
        }
        let (c_in, f_in, t_len) = (sx[0], sx[1], sx[2]);
        let (c_out, kf, kt) = (sw[0], sw[2], sw[3]);
        if pad == FreqPad::Valid && f_in < kf {
            return dim_err("conv2d: kernel larger than input", &sx, &sw);
        }
        if t_len == 0 || stride_f == 0 {
            return dim_err("conv2d", &sx, &sw);
        }
        let geom = ConvGeom::new(c_in, c_out, f_in, t_len, kf, kt, stride_f, pad);
        let mut out = vec![T::ZERO; c_out * geom.f_out * t_len];
        kernels::conv2d_fwd(self.value(x).data(), self.value(w).data(), &mut out, &geom);
        let rg = self.needs(&[x, w]);
        Ok(self.push(
            Tensor::from_vec(vec![c_out, geom.f_out, t_len], out)?,
            Op::Conv2d { x, w, geom },
            rg,
        ))
    }

    /// Transposed convolution: y[Cin,F',T] with w[Cin,Cout,kF,kT] producing
    /// [Cout,out_f,T]. `stride_f`/`pad` describe the mirrored forward conv;
    /// `out_f` must be consistent with them.
    pub fn conv2d_transpose(
        &mut self,
        y: Var,
        w: Var,
        stride_f: usize,
        pad: FreqPad,
        out_f: usize,
    ) -> Result<Var> {
        let (sy, sw) = (self.shape(y).to_vec(), self.shape(w).to_vec());
        if sy.len() != 3 || sw.len() != 4 || sy[0] != sw[0] {
            return dim_err("conv2d_transpose", &sy, &sw);
        }
        let (c_mid, f_mid, t_len) = (sy[0], sy[1], sy[2]);
        let (c_out, kf, kt) = (sw[1], sw[2], sw[3]);
        // The mirrored forward conv maps out_f -> f_mid.
        let geom = ConvGeom::new(c_out, c_mid, out_f, t_len, kf, kt, stride_f, pad);
        if geom.f_out != f_mid {
            return dim_err(
                "conv2d_transpose: inconsistent output extent",
                &[out_f],
                &[f_mid],
            );
        }
        let mut out = vec![T::ZERO; c_out * out_f * t_len];
        kernels::conv2d_transpose_fwd(self.value(y).data(), self.value(w).data(), &mut out, &geom);
        let rg = self.needs(&[y, w]);
        Ok(self.push(
            Tensor::from_vec(vec![c_out, out_f, t_len], out)?,
            Op::Conv2dTranspose { y, w, geom },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err("add", self.shape(a), self.shape(b));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err("sub", self.shape(a), self.shape(b));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err("mul", self.shape(a), self.shape(b));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale { x, c }, rg)
    }

    /// x[..., suffix] + b[suffix], broadcast over the leading axes.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != sb[..] {
            return dim_err("add_broadcast", &sx, &sb);
        }
        let bn = self.value(b).numel();
        let bd = self.value(b).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % bn])
            .collect();
        let rg = self.needs(&[x, b]);
        Ok(self.push(Tensor::from_vec(sx, out)?, Op::AddBroadcast { x, b }, rg))
    }

    /// x[C, ...] + b[C], the bias broadcast over everything after the
    /// channel axis.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = sx[0];
        if self.shape(b) != [c] {
            return dim_err("add_channel_bias", &sx, self.shape(b));
        }
        let inner = self.value(x).numel() / c;
        let bd = self.value(b).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i / inner])
            .collect();
        let rg = self.needs(&[x, b]);
        Ok(self.push(Tensor::from_vec(sx, out)?, Op::AddChannelBias { x, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::ZERO));
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Channel-wise PReLU; x[C, ...], slope[C].
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = sx[0];
        if self.shape(slope) != [c] {
            return dim_err("prelu", &sx, self.shape(slope));
        }
        let inner = self.value(x).numel() / c;
        let sl = self.value(slope).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > T::ZERO { v } else { sl[i / inner] * v })
            .collect();
        let rg = self.needs(&[x, slope]);
        Ok(self.push(Tensor::from_vec(sx, out)?, Op::PRelu { x, slope }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::ONE / (T::ONE + (-v).exp()));
        let rg = self.needs(&[x]);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.needs(&[x]);
        self.push(out, Op::Tanh { x }, rg)
    }

    /// Softmax along the last axis (subtract-max stabilized).
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("softmax on rank >= 1");
        let mut out = vec![T::ZERO; self.value(x).numel()];
        kernels::softmax_rows(self.value(x).data(), &mut out, n);
        let rg = self.needs(&[x]);
        self.push(
            Tensor::from_vec(shape, out).expect("softmax shape"),
            Op::SoftmaxLast { x },
            rg,
        )
    }

    /// Softmax along an arbitrary axis of a rank-1..3 tensor.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return dim_err("softmax", self.shape(x), &[axis]);
        }
        if axis == rank - 1 {
            return Ok(self.softmax_last(x));
        }
        match rank {
            2 => {
                let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                let x3 = self.reshape(x, vec![1, m, n])?;
                let xt = self.permute3(x3, [0, 2, 1])?;
                let s = self.softmax_last(xt);
                let st = self.permute3(s, [0, 2, 1])?;
                self.reshape(st, vec![m, n])
            }
            3 => {
                let perm = if axis == 0 { [1, 2, 0] } else { [0, 2, 1] };
                let inv = if axis == 0 { [2, 0, 1] } else { [0, 2, 1] };
                let xt = self.permute3(x, perm)?;
                let s = self.softmax_last(xt);
                self.permute3(s, inv)
            }
            _ => dim_err("softmax: unsupported rank/axis", self.shape(x), &[axis]),
        }
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.sqrt());
        let rg = self.needs(&[x]);
        self.push(out, Op::Sqrt { x }, rg)
    }

    pub fn pow_const(&mut self, x: Var, p: T) -> Var {
        let out = self.value(x).map(|v| v.powf(p));
        let rg = self.needs(&[x]);
        self.push(out, Op::PowConst { x, p }, rg)
    }

    pub fn clamp_min(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v.max(c));
        let rg = self.needs(&[x]);
        self.push(out, Op::ClampMin { x, c }, rg)
    }

    /// Full reduction to a scalar of shape [1].
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(acc), Op::Sum { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    pub fn permute3(&mut self, x: Var, perm: [usize; 3]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return dim_err("permute3", &sx, perm.as_ref());
        }
        let out_shape = [sx[perm[0]], sx[perm[1]], sx[perm[2]]];
        let mut out = vec![T::ZERO; self.value(x).numel()];
        permute3_copy(self.value(x).data(), &mut out, &sx, perm);
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_vec(out_shape.to_vec(), out)?,
            Op::Permute3 { x, perm },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return dim_err("concat", &[], &[axis]);
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return dim_err("concat", &first, &[axis]);
        }
        let mut axis_total = 0usize;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return dim_err("concat", &first, s);
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::ZERO; out_shape.iter().product()];
        let row_out = axis_total * inner;
        let mut offset = 0usize;
        for &v in inputs {
            let s_axis = self.shape(v)[axis];
            let chunk = s_axis * inner;
            let data = self.value(v).data();
            for o in 0..outer {
                out[o * row_out + offset..o * row_out + offset + chunk]
                    .copy_from_slice(&data[o * chunk..(o + 1) * chunk]);
            }
            offset += chunk;
        }
        let rg = self.needs(inputs);
        Ok(self.push(
            Tensor::from_vec(out_shape, out)?,
            Op::Concat {
                axis,
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return dim_err("slice", &sx, &[axis, start, len]);
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let row_in = sx[axis] * inner;
        let chunk = len * inner;
        let mut out = vec![T::ZERO; outer * chunk];
        let data = self.value(x).data();
        for o in 0..outer {
            out[o * chunk..(o + 1) * chunk].copy_from_slice(
                &data[o * row_in + start * inner..o * row_in + start * inner + chunk],
            );
        }
        let mut out_shape = sx;
        out_shape[axis] = len;
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_vec(out_shape, out)?,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            rg,
        ))
    }

    /// Instance normalization on [T,F,C]: per (frame, channel) the F values
    /// are centered and scaled to unit variance, then the per-channel affine
    /// (gamma, beta) is applied. Frame-local, so it preserves causality.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return dim_err("instance_norm", &sx, &[]);
        }
        let (t_len, f_len, c_len) = (sx[0], sx[1], sx[2]);
        if self.shape(gamma) != [c_len] || self.shape(beta) != [c_len] {
            return dim_err("instance_norm affine", &sx, self.shape(gamma));
        }
        let data = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let inv_f = T::ONE / T::from_f64(f_len as f64);
        let mut out = vec![T::ZERO; data.len()];
        // saved: per-(t,c) mean and inverse sigma, each t_len*c_len
        let mut means = vec![T::ZERO; t_len * c_len];
        let mut inv_sigmas = vec![T::ZERO; t_len * c_len];
        for t in 0..t_len {
            for c in 0..c_len {
                let base = t * f_len * c_len + c;
                let mut mean = T::ZERO;
                for f in 0..f_len {
                    mean += data[base + f * c_len];
                }
                mean *= inv_f;
                let mut var = T::ZERO;
                for f in 0..f_len {
                    let d = data[base + f * c_len] - mean;
                    var += d * d;
                }
                var *= inv_f;
                let inv_sigma = T::ONE / (var + eps).sqrt();
                means[t * c_len + c] = mean;
                inv_sigmas[t * c_len + c] = inv_sigma;
                for f in 0..f_len {
                    let idx = base + f * c_len;
                    out[idx] = g[c] * (data[idx] - mean) * inv_sigma + be[c];
                }
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push_saved(
            Tensor::from_vec(sx, out)?,
            Op::InstanceNorm { x, gamma, beta },
            rg,
            vec![means, inv_sigmas],
        ))
    }

    /// Batch normalization on [C,F,T]: per channel over all (F,T) positions.
    /// `BnMode::Batch` normalizes with the tensor's own statistics (training)
    /// and stashes them retrievably; `BnMode::Running` uses stored statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: BnMode<T>,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return dim_err("batch_norm", &sx, &[]);
        }
        let (c_len, f_len, t_len) = (sx[0], sx[1], sx[2]);
        if self.shape(gamma) != [c_len] || self.shape(beta) != [c_len] {
            return dim_err("batch_norm affine", &sx, self.shape(gamma));
        }
        let n = f_len * t_len;
        let inv_n = T::ONE / T::from_f64(n as f64);
        let data = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let (means, vars): (Vec<T>, Vec<T>) = match &mode {
            BnMode::Batch => {
                let mut means = vec![T::ZERO; c_len];
                let mut vars = vec![T::ZERO; c_len];
                for c in 0..c_len {
                    let slab = &data[c * n..(c + 1) * n];
                    let mut mean = T::ZERO;
                    for &v in slab {
                        mean += v;
                    }
                    mean *= inv_n;
                    let mut var = T::ZERO;
                    for &v in slab {
                        let d = v - mean;
                        var += d * d;
                    }
                    var *= inv_n;
                    means[c] = mean;
                    vars[c] = var;
                }
                (means, vars)
            }
            BnMode::Running { mean, var } => {
                if mean.len() != c_len || var.len() != c_len {
                    return dim_err("batch_norm stats", &sx, &[mean.len()]);
                }
                (mean.as_ref().clone(), var.as_ref().clone())
            }
        };
        let mut out = vec![T::ZERO; data.len()];
        let mut inv_sigmas = vec![T::ZERO; c_len];
        for c in 0..c_len {
            let inv_sigma = T::ONE / (vars[c] + eps).sqrt();
            inv_sigmas[c] = inv_sigma;
            let slab = &data[c * n..(c + 1) * n];
            let out_slab = &mut out[c * n..(c + 1) * n];
            for (o, &v) in out_slab.iter_mut().zip(slab.iter()) {
                *o = g[c] * (v - means[c]) * inv_sigma + be[c];
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push_saved(
            Tensor::from_vec(sx, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
            },
            rg,
            vec![means, vars, inv_sigmas],
        ))
    }

    /// Unidirectional LSTM over a sequence, batched over the middle axis.
    ///
    /// x[T,B,C], w[4H, C+H], b[4H], h0[B,H], c0[B,H] -> h_seq[T,B,H].
    /// Gate order in `w`/`b` is input, forget, cell, output.
    pub fn lstm_seq(&mut self, x: Var, w: Var, b: Var, h0: Var, c0: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 2 {
            return dim_err("lstm_seq", &sx, &sw);
        }
        let (t_len, bsz, c_in) = (sx[0], sx[1], sx[2]);
        if !sw[0].is_multiple_of(4) {
            return dim_err("lstm_seq gates", &sw, &[4]);
        }
        let hidden = sw[0] / 4;
        if sw[1] != c_in + hidden
            || self.shape(b) != [4 * hidden]
            || self.shape(h0) != [bsz, hidden]
            || self.shape(c0) != [bsz, hidden]
        {
            return dim_err("lstm_seq", &sx, &sw);
        }
        let xd = self.value(x).data().to_vec();
        let wd = self.value(w).data().to_vec();
        let bd = self.value(b).data().to_vec();
        let mut h = self.value(h0).data().to_vec();
        let mut c = self.value(c0).data().to_vec();

        let mut h_seq = vec![T::ZERO; t_len * bsz * hidden];
        // saved: post-activation gates [T * B * 4H] and cell states [T * B * H]
        let mut gates_hist = vec![T::ZERO; t_len * bsz * 4 * hidden];
        let mut cell_hist = vec![T::ZERO; t_len * bsz * hidden];
        let mut cat = vec![T::ZERO; bsz * (c_in + hidden)];
        for t in 0..t_len {
            let x_t = &xd[t * bsz * c_in..(t + 1) * bsz * c_in];
            for bi in 0..bsz {
                cat[bi * (c_in + hidden)..bi * (c_in + hidden) + c_in]
                    .copy_from_slice(&x_t[bi * c_in..(bi + 1) * c_in]);
                cat[bi * (c_in + hidden) + c_in..(bi + 1) * (c_in + hidden)]
                    .copy_from_slice(&h[bi * hidden..(bi + 1) * hidden]);
            }
            let gates = &mut gates_hist[t * bsz * 4 * hidden..(t + 1) * bsz * 4 * hidden];
            kernels::matmul_nt(&cat, &wd, gates, bsz, c_in + hidden, 4 * hidden);
            for bi in 0..bsz {
                for j in 0..4 * hidden {
                    gates[bi * 4 * hidden + j] += bd[j];
                }
            }
            for bi in 0..bsz {
                let gr = &mut gates[bi * 4 * hidden..(bi + 1) * 4 * hidden];
                for (j, gate) in gr.iter_mut().enumerate() {
                    *gate = if j / hidden == 2 {
                        gate.tanh()
                    } else {
                        T::ONE / (T::ONE + (-*gate).exp())
                    };
                }
                for j in 0..hidden {
                    let (i_g, f_g, g_g, o_g) = (
                        gr[j],
                        gr[hidden + j],
                        gr[2 * hidden + j],
                        gr[3 * hidden + j],
                    );
                    let c_new = f_g * c[bi * hidden + j] + i_g * g_g;
                    c[bi * hidden + j] = c_new;
                    h[bi * hidden + j] = o_g * c_new.tanh();
                }
            }
            cell_hist[t * bsz * hidden..(t + 1) * bsz * hidden].copy_from_slice(&c);
            h_seq[t * bsz * hidden..(t + 1) * bsz * hidden].copy_from_slice(&h);
        }
        let rg = self.needs(&[x, w, b, h0, c0]);
        Ok(self.push_saved(
            Tensor::from_vec(vec![t_len, bsz, hidden], h_seq)?,
            Op::LstmSeq {
                x,
                w,
                b,
                h0,
                c0,
                hidden,
            },
            rg,
            vec![gates_hist, cell_hist],
        ))
    }

    // ---- backward -----------------------------------------------------

    fn accumulate(&mut self, v: Var, contribution: &[T]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gv, &cv) in g.iter_mut().zip(contribution.iter()) {
                    *gv += cv;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    /// Reverse accumulation from a scalar loss. Gradients of leaves not on
    /// any path to the loss stay absent (zero). Calling twice without
    /// `zero_grads` sums gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(DparnError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, &[T::ONE]);
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            // take (not copy) the output gradient: intermediates are consumed,
            // so repeated backward calls sum gradients on leaves only
            let dy = self.nodes[idx].grad.take().expect("checked above");
            self.backward_op(Var(idx), &op, &dy);
        }
        Ok(())
    }

    fn backward_op(&mut self, out: Var, op: &Op<T>, dy: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::ZERO; m * k];
                    kernels::matmul_nt(dy, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::ZERO; k * n];
                    kernels::matmul_tn(self.value(*a).data(), dy, &mut db, k, m, n);
                    self.accumulate(*b, &db);
                }
            }
            Op::MatmulNT { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::ZERO; m * k];
                    kernels::matmul(dy, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::ZERO; n * k];
                    kernels::matmul_tn(dy, self.value(*a).data(), &mut db, n, m, k);
                    self.accumulate(*b, &db);
                }
            }
            Op::Bmm { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::ZERO; bsz * m * k];
                    for i in 0..bsz {
                        kernels::matmul_nt(
                            &dy[i * m * n..(i + 1) * m * n],
                            &self.value(*b).data()[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::ZERO; bsz * k * n];
                    for i in 0..bsz {
                        kernels::matmul_tn(
                            &self.value(*a).data()[i * m * k..(i + 1) * m * k],
                            &dy[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::BmmNT { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::ZERO; bsz * m * k];
                    for i in 0..bsz {
                        kernels::matmul(
                            &dy[i * m * n..(i + 1) * m * n],
                            &self.value(*b).data()[i * n * k..(i + 1) * n * k],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::ZERO; bsz * n * k];
                    for i in 0..bsz {
                        kernels::matmul_tn(
                            &dy[i * m * n..(i + 1) * m * n],
                            &self.value(*a).data()[i * m * k..(i + 1) * m * k],
                            &mut db[i * n * k..(i + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Conv2d { x, w, geom } => {
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![T::ZERO; self.value(*x).numel()];
                    kernels::conv2d_input_grad(dy, self.value(*w).data(), &mut dx, geom);
                    self.accumulate(*x, &dx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![T::ZERO; self.value(*w).numel()];
                    kernels::conv2d_weight_grad(self.value(*x).data(), dy, &mut dw, geom);
                    self.accumulate(*w, &dw);
                }
            }
            Op::Conv2dTranspose { y, w, geom } => {
                if self.nodes[y.0].requires_grad {
                    let mut dyy = vec![T::ZERO; self.value(*y).numel()];
                    kernels::conv2d_transpose_input_grad(dy, self.value(*w).data(), &mut dyy, geom);
                    self.accumulate(*y, &dyy);
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![T::ZERO; self.value(*w).numel()];
                    kernels::conv2d_transpose_weight_grad(self.value(*y).data(), dy, &mut dw, geom);
                    self.accumulate(*w, &dw);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, dy);
                self.accumulate(*b, dy);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, dy);
                if self.nodes[b.0].requires_grad {
                    let neg: Vec<T> = dy.iter().map(|&v| -v).collect();
                    self.accumulate(*b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<T> = dy
                        .iter()
                        .zip(self.value(*b).data().iter())
                        .map(|(&d, &bv)| d * bv)
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<T> = dy
                        .iter()
                        .zip(self.value(*a).data().iter())
                        .map(|(&d, &av)| d * av)
                        .collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::Scale { x, c } => {
                if self.nodes[x.0].requires_grad {
                    let dx: Vec<T> = dy.iter().map(|&d| d * *c).collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::AddBroadcast { x, b } => {
                self.accumulate(*x, dy);
                if self.nodes[b.0].requires_grad {
                    let bn = self.value(*b).numel();
                    let mut db = vec![T::ZERO; bn];
                    for (i, &d) in dy.iter().enumerate() {
                        db[i % bn] += d;
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::AddChannelBias { x, b } => {
                self.accumulate(*x, dy);
                if self.nodes[b.0].requires_grad {
                    let c = self.value(*b).numel();
                    let inner = dy.len() / c;
                    let mut db = vec![T::ZERO; c];
                    for (i, &d) in dy.iter().enumerate() {
                        db[i / inner] += d;
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Relu { x } => {
                if self.nodes[x.0].requires_grad {
                    let dx: Vec<T> = dy
                        .iter()
                        .zip(self.value(*x).data().iter())
                        .map(|(&d, &xv)| if xv > T::ZERO { d } else { T::ZERO })
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::PRelu { x, slope } => {
                let c = self.shape(*x)[0];
                let inner = self.value(*x).numel() / c;
                if self.nodes[x.0].requires_grad {
                    let sl = self.value(*slope).data();
                    let dx: Vec<T> = dy
                        .iter()
                        .zip(self.value(*x).data().iter())
                        .enumerate()
                        .map(|(i, (&d, &xv))| if xv > T::ZERO { d } else { d * sl[i / inner] })
                        .collect();
                    self.accumulate(*x, &dx);
                }
                if self.nodes[slope.0].requires_grad {
                    let mut ds = vec![T::ZERO; c];
                    for (i, (&d, &xv)) in dy.iter().zip(self.value(*x).data().iter()).enumerate() {
                        if xv <= T::ZERO {
                            ds[i / inner] += d * xv;
                        }
                    }
                    self.accumulate(*slope, &ds);
                }
            }
            Op::Sigmoid { x } => {
                if self.nodes[x.0].requires_grad {
                    let dx: Vec<T> = dy
                        .iter()
                        .zip(self.value(out).data().iter())
                        .map(|(&d, &yv)| d * yv * (T::ONE - yv))
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::Tanh { x } => {
                if self.nodes[x.0].requires_grad {
                    let dx: Vec<T> = dy
                        .iter()
                        .zip(self.value(out).data().iter())
                        .map(|(&d, &yv)| d * (T::ONE - yv * yv))
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::SoftmaxLast { x } => {
                if self.nodes[x.0].requires_grad {
                    let n = *self.shape(out).last().expect("rank >= 1");
                    let mut dx = vec![T::ZERO; dy.len()];
                    kernels::softmax_rows_grad(self.value(out).data(), dy, &mut dx, n);
                    self.accumulate(*x, &dx);
                }
            }
            Op::Sqrt { x } => {
                if self.nodes[x.0].requires_grad {
                    let half = T::from_f64(0.5);
                    let dx: Vec<T> = dy
                        .iter()
                        .zip(self.value(out).data().iter())
                        .map(|(&d, &yv)| d * half / yv.max(T::from_f64(1e-300)))
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::PowConst { x, p } => {
                if self.nodes[x.0].requires_grad {
                    let pm1 = *p - T::ONE;
                    let dx: Vec<T> = dy
                        .iter()
                        .zip(self.value(*x).data().iter())
                        .map(|(&d, &xv)| d * *p * xv.powf(pm1))
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::ClampMin { x, c } => {
                if self.nodes[x.0].requires_grad {
                    let dx: Vec<T> = dy
                        .iter()
                        .zip(self.value(*x).data().iter())
                        .map(|(&d, &xv)| if xv > *c { d } else { T::ZERO })
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::Sum { x } => {
                if self.nodes[x.0].requires_grad {
                    let dx = vec![dy[0]; self.value(*x).numel()];
                    self.accumulate(*x, &dx);
                }
            }
            Op::Reshape { x } => {
                self.accumulate(*x, dy);
            }
            Op::Permute3 { x, perm } => {
                if self.nodes[x.0].requires_grad {
                    let out_shape = self.shape(out).to_vec();
                    let mut inv = [0usize; 3];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let mut dx = vec![T::ZERO; dy.len()];
                    permute3_copy(dy, &mut dx, &out_shape, inv);
                    self.accumulate(*x, &dx);
                }
            }
            Op::Concat { axis, inputs } => {
                let out_shape = self.shape(out).to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let row_out = out_shape[*axis] * inner;
                let mut offset = 0usize;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.nodes[v.0].requires_grad {
                        let mut dv = vec![T::ZERO; outer * chunk];
                        for o in 0..outer {
                            dv[o * chunk..(o + 1) * chunk].copy_from_slice(
                                &dy[o * row_out + offset..o * row_out + offset + chunk],
                            );
                        }
                        self.accumulate(v, &dv);
                    }
                    offset += chunk;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                if self.nodes[x.0].requires_grad {
                    let sx = self.shape(*x).to_vec();
                    let outer: usize = sx[..*axis].iter().product();
                    let inner: usize = sx[*axis + 1..].iter().product();
                    let row_in = sx[*axis] * inner;
                    let chunk = len * inner;
                    let mut dx = vec![T::ZERO; self.value(*x).numel()];
                    for o in 0..outer {
                        dx[o * row_in + start * inner..o * row_in + start * inner + chunk]
                            .copy_from_slice(&dy[o * chunk..(o + 1) * chunk]);
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::InstanceNorm { x, gamma, beta } => {
                let sx = self.shape(*x).to_vec();
                let (t_len, f_len, c_len) = (sx[0], sx[1], sx[2]);
                let inv_f = T::ONE / T::from_f64(f_len as f64);
                let means = self.nodes[out.0].saved[0].clone();
                let inv_sigmas = self.nodes[out.0].saved[1].clone();
                let xd = self.value(*x).data();
                let g = self.value(*gamma).data();
                let mut dx = vec![T::ZERO; xd.len()];
                let mut dg = vec![T::ZERO; c_len];
                let mut db = vec![T::ZERO; c_len];
                for t in 0..t_len {
                    for c in 0..c_len {
                        let base = t * f_len * c_len + c;
                        let mean = means[t * c_len + c];
                        let inv_sigma = inv_sigmas[t * c_len + c];
                        let mut sum_dy = T::ZERO;
                        let mut sum_dy_xhat = T::ZERO;
                        for f in 0..f_len {
                            let idx = base + f * c_len;
                            let xhat = (xd[idx] - mean) * inv_sigma;
                            sum_dy += dy[idx];
                            sum_dy_xhat += dy[idx] * xhat;
                        }
                        db[c] += sum_dy;
                        dg[c] += sum_dy_xhat;
                        let mean_dy = sum_dy * inv_f;
                        let mean_dy_xhat = sum_dy_xhat * inv_f;
                        let scale = g[c] * inv_sigma;
                        for f in 0..f_len {
                            let idx = base + f * c_len;
                            let xhat = (xd[idx] - mean) * inv_sigma;
                            dx[idx] = scale * (dy[idx] - mean_dy - xhat * mean_dy_xhat);
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    self.accumulate(*x, &dx);
                }
                if self.nodes[gamma.0].requires_grad {
                    self.accumulate(*gamma, &dg);
                }
                if self.nodes[beta.0].requires_grad {
                    self.accumulate(*beta, &db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                ..
            } => {
                let sx = self.shape(*x).to_vec();
                let (c_len, f_len, t_len) = (sx[0], sx[1], sx[2]);
                let n = f_len * t_len;
                let inv_n = T::ONE / T::from_f64(n as f64);
                let means = self.nodes[out.0].saved[0].clone();
                let inv_sigmas = self.nodes[out.0].saved[2].clone();
                let xd = self.value(*x).data();
                let g = self.value(*gamma).data();
                let mut dx = vec![T::ZERO; xd.len()];
                let mut dg = vec![T::ZERO; c_len];
                let mut db = vec![T::ZERO; c_len];
                let stats_follow_input = matches!(mode, BnMode::Batch);
                for c in 0..c_len {
                    let slab = &xd[c * n..(c + 1) * n];
                    let dy_slab = &dy[c * n..(c + 1) * n];
                    let mut sum_dy = T::ZERO;
                    let mut sum_dy_xhat = T::ZERO;
                    for (&xv, &d) in slab.iter().zip(dy_slab.iter()) {
                        let xhat = (xv - means[c]) * inv_sigmas[c];
                        sum_dy += d;
                        sum_dy_xhat += d * xhat;
                    }
                    dg[c] = sum_dy_xhat;
                    db[c] = sum_dy;
                    let scale = g[c] * inv_sigmas[c];
                    let dx_slab = &mut dx[c * n..(c + 1) * n];
                    if stats_follow_input {
                        let mean_dy = sum_dy * inv_n;
                        let mean_dy_xhat = sum_dy_xhat * inv_n;
                        for ((dxv, &xv), &d) in
                            dx_slab.iter_mut().zip(slab.iter()).zip(dy_slab.iter())
                        {
                            let xhat = (xv - means[c]) * inv_sigmas[c];
                            *dxv = scale * (d - mean_dy - xhat * mean_dy_xhat);
                        }
                    } else {
                        for (dxv, &d) in dx_slab.iter_mut().zip(dy_slab.iter()) {
                            *dxv = scale * d;
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    self.accumulate(*x, &dx);
                }
                if self.nodes[gamma.0].requires_grad {
                    self.accumulate(*gamma, &dg);
                }
                if self.nodes[beta.0].requires_grad {
                    self.accumulate(*beta, &db);
                }
            }
            Op::LstmSeq {
                x,
                w,
                b,
                h0,
                c0,
                hidden,
            } => {
                self.backward_lstm(out, *x, *w, *b, *h0, *c0, *hidden, dy);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_lstm(
        &mut self,
        out: Var,
        x: Var,
        w: Var,
        b: Var,
        h0: Var,
        c0: Var,
        hidden: usize,
        dy: &[T],
    ) {
        let sx = self.shape(x).to_vec();
        let (t_len, bsz, c_in) = (sx[0], sx[1], sx[2]);
        let gates_hist = self.nodes[out.0].saved[0].clone();
        let cell_hist = self.nodes[out.0].saved[1].clone();
        let xd = self.value(x).data().to_vec();
        let wd = self.value(w).data().to_vec();
        let h0d = self.value(h0).data().to_vec();
        let c0d = self.value(c0).data().to_vec();

        let cat_w = c_in + hidden;
        let mut dx = vec![T::ZERO; xd.len()];
        let mut dw = vec![T::ZERO; wd.len()];
        let mut db = vec![T::ZERO; 4 * hidden];
        let mut dh_carry = vec![T::ZERO; bsz * hidden];
        let mut dc_carry = vec![T::ZERO; bsz * hidden];
        let mut cat = vec![T::ZERO; bsz * cat_w];
        let mut dgates = vec![T::ZERO; bsz * 4 * hidden];
        let mut dcat = vec![T::ZERO; bsz * cat_w];
        for t in (0..t_len).rev() {
            let gates = &gates_hist[t * bsz * 4 * hidden..(t + 1) * bsz * 4 * hidden];
            let cells = &cell_hist[t * bsz * hidden..(t + 1) * bsz * hidden];
            // previous hidden/cell state: reconstructed from history (or the
            // initial state at t = 0)
            let (prev_cells, prev_gates): (&[T], Option<&[T]>) = if t == 0 {
                (&c0d, None)
            } else {
                (
                    &cell_hist[(t - 1) * bsz * hidden..t * bsz * hidden],
                    Some(&gates_hist[(t - 1) * bsz * 4 * hidden..t * bsz * 4 * hidden]),
                )
            };
            for bi in 0..bsz {
                let gr = &gates[bi * 4 * hidden..(bi + 1) * 4 * hidden];
                let dgr = &mut dgates[bi * 4 * hidden..(bi + 1) * 4 * hidden];
                for j in 0..hidden {
                    let dh = dy[t * bsz * hidden + bi * hidden + j] + dh_carry[bi * hidden + j];
                    let (i_g, f_g, g_g, o_g) = (
                        gr[j],
                        gr[hidden + j],
                        gr[2 * hidden + j],
                        gr[3 * hidden + j],
                    );
                    let c_t = cells[bi * hidden + j];
                    let tanh_c = c_t.tanh();
                    let dc = dc_carry[bi * hidden + j] + dh * o_g * (T::ONE - tanh_c * tanh_c);
                    let c_prev = prev_cells[bi * hidden + j];
                    dgr[j] = dc * g_g * i_g * (T::ONE - i_g);
                    dgr[hidden + j] = dc * c_prev * f_g * (T::ONE - f_g);
                    dgr[2 * hidden + j] = dc * i_g * (T::ONE - g_g * g_g);
                    dgr[3 * hidden + j] = dh * tanh_c * o_g * (T::ONE - o_g);
                    dc_carry[bi * hidden + j] = dc * f_g;
                }
                // rebuild cat_t = [x_t, h_{t-1}]
                let x_t = &xd[t * bsz * c_in + bi * c_in..t * bsz * c_in + (bi + 1) * c_in];
                cat[bi * cat_w..bi * cat_w + c_in].copy_from_slice(x_t);
                match prev_gates {
                    None => cat[bi * cat_w + c_in..(bi + 1) * cat_w]
                        .copy_from_slice(&h0d[bi * hidden..(bi + 1) * hidden]),
                    Some(pg) => {
                        let pgr = &pg[bi * 4 * hidden..(bi + 1) * 4 * hidden];
                        for j in 0..hidden {
                            cat[bi * cat_w + c_in + j] =
                                pgr[3 * hidden + j] * prev_cells[bi * hidden + j].tanh();
                        }
                    }
                }
            }
            // dW += dgatesᵀ · cat, db += column sums of dgates
            kernels::matmul_tn(&dgates, &cat, &mut dw, 4 * hidden, bsz, cat_w);
            for bi in 0..bsz {
                for j in 0..4 * hidden {
                    db[j] += dgates[bi * 4 * hidden + j];
                }
            }
            // dcat = dgates · W → split into dx_t and dh_carry
            dcat.iter_mut().for_each(|v| *v = T::ZERO);
            kernels::matmul(&dgates, &wd, &mut dcat, bsz, 4 * hidden, cat_w);
            for bi in 0..bsz {
                for j in 0..c_in {
                    dx[t * bsz * c_in + bi * c_in + j] = dcat[bi * cat_w + j];
                }
                for j in 0..hidden {
                    dh_carry[bi * hidden + j] = dcat[bi * cat_w + c_in + j];
                }
            }
        }
        if self.nodes[x.0].requires_grad {
            self.accumulate(x, &dx);
        }
        if self.nodes[w.0].requires_grad {
            self.accumulate(w, &dw);
        }
        if self.nodes[b.0].requires_grad {
            self.accumulate(b, &db);
        }
        if self.nodes[h0.0].requires_grad {
            self.accumulate(h0, &dh_carry);
        }
        if self.nodes[c0.0].requires_grad {
            self.accumulate(c0, &dc_carry);
        }
    }
}

/// One LSTM step built from tape primitives. x[B,C], h/c[B,H],
/// w[4H, C+H] (input, forget, cell, output gate order), b[4H].
pub fn lstm_cell<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    h: Var,
    c: Var,
    w: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let hidden = tape.shape(h)[1];
    let cat = tape.concat(&[x, h], 1)?;
    let pre = tape.matmul_nt(cat, w)?;
    let pre = tape.add_broadcast(pre, b)?;
    let i_pre = tape.slice(pre, 1, 0, hidden)?;
    let f_pre = tape.slice(pre, 1, hidden, hidden)?;
    let g_pre = tape.slice(pre, 1, 2 * hidden, hidden)?;
    let o_pre = tape.slice(pre, 1, 3 * hidden, hidden)?;
    let i_g = tape.sigmoid(i_pre);
    let f_g = tape.sigmoid(f_pre);
    let g_g = tape.tanh(g_pre);
    let o_g = tape.sigmoid(o_pre);
    let fc = tape.mul(f_g, c)?;
    let ig = tape.mul(i_g, g_g)?;
    let c_new = tape.add(fc, ig)?;
    let tanh_c = tape.tanh(c_new);
    let h_new = tape.mul(o_g, tanh_c)?;
    Ok((h_new, c_new))
}

/// x[..., K] @ w[K, N] (+ bias[N]) applied position-wise.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    let k = *sx.last().expect("linear input rank >= 1");
    let m: usize = sx[..sx.len() - 1].iter().product();
    let flat = tape.reshape(x, vec![m, k])?;
    let mut y = tape.matmul(flat, w)?;
    if let Some(b) = bias {
        y = tape.add_broadcast(y, b)?;
    }
    let n = tape.shape(w)[1];
    let mut out_shape = sx[..sx.len() - 1].to_vec();
    out_shape.push(n);
    tape.reshape(y, out_shape)
}

fn permute3_copy<T: Scalar>(src: &[T], dst: &mut [T], shape: &[usize], perm: [usize; 3]) {
    let (d0, d1, d2) = (shape[0], shape[1], shape[2]);
    let out_shape = [shape[perm[0]], shape[perm[1]], shape[perm[2]]];
    let strides_in = [d1 * d2, d2, 1];
    let out_strides = [out_shape[1] * out_shape[2], out_shape[2], 1];
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            let base = i0 * strides_in[0] + i1 * strides_in[1];
            for i2 in 0..d2 {
                let idx = [i0, i1, i2];
                let o = idx[perm[0]] * out_strides[0]
                    + idx[perm[1]] * out_strides[1]
                    + idx[perm[2]] * out_strides[2];
                dst[o] = src[base + i2];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::gradcheck::{central_diff, rel_err, FD_STEP};

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::uniform(shape, 1.0, rng)
    }

    /// Finite-difference oracle: every leaf's analytic gradient must match
    /// central differences within `tol` relative error.
    fn check_grads<F>(inputs: &[Tensor<f64>], build: F, tol: f64)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).unwrap();
        for (which, input) in inputs.iter().enumerate() {
            let analytic = tape
                .grad(vars[which])
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; input.numel()]);
            let f = |probe: &Tensor<f64>| -> f64 {
                let mut t2 = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        t2.leaf(if i == which { probe.clone() } else { t.clone() }, false)
                    })
                    .collect();
                let l = build(&mut t2, &vs);
                t2.value(l).data()[0]
            };
            for (i, &a) in analytic.iter().enumerate() {
                let numeric = central_diff(&f, input, i, FD_STEP);
                let e = rel_err(a, numeric);
                assert!(
                    e < tol,
                    "leaf {} element {}: analytic {} numeric {} rel_err {}",
                    which,
                    i,
                    analytic[i],
                    numeric,
                    e
                );
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![3], vec![1.0f64, -2.0, 4.0]).unwrap(),
            true,
        );
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_twice_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![3], vec![1.0f64, -2.0, 4.0]).unwrap(),
            true,
        );
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 8.0]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0f64, 2.0]).unwrap(), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[2, 2]), true);
        assert!(matches!(
            tape.backward(x),
            Err(crate::error::DparnError::Contract(_))
        ));
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0f64, 2.0]).unwrap(), true);
        let y = tape.leaf(Tensor::from_vec(vec![2], vec![3.0f64, 4.0]).unwrap(), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(y).is_none());
    }

    #[test]
    fn matmul_identity_case() {
        let mut rng = Rng::new(11);
        let x = rand_tensor(&[3, 3], &mut rng);
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(
            Tensor::from_vec(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let xv = tape.constant(x.clone());
        let y = tape.matmul(eye, xv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message should carry shapes: {msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = Rng::new(1);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4, 2], &mut rng);
        check_grads(
            &[a, b],
            |tape, vs| {
                let y = tape.matmul(vs[0], vs[1]).unwrap();
                tape.sum(y)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_nt_and_bmm_gradients() {
        let mut rng = Rng::new(2);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[5, 4], &mut rng);
        check_grads(
            &[a, b],
            |tape, vs| {
                let y = tape.matmul_nt(vs[0], vs[1]).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum(sq)
            },
            1e-6,
        );
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[2, 4, 2], &mut rng);
        check_grads(
            &[a, b],
            |tape, vs| {
                let y = tape.bmm(vs[0], vs[1]).unwrap();
                tape.sum(y)
            },
            1e-6,
        );
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[2, 5, 4], &mut rng);
        check_grads(
            &[a, b],
            |tape, vs| {
                let y = tape.bmm_nt(vs[0], vs[1]).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut rng = Rng::new(3);
        let x = rand_tensor(&[1, 4, 5], &mut rng);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv2d(xv, w, 1, FreqPad::Same).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    /// Independent direct-summation oracle: materialize the padded input and
    /// slide the kernel explicitly.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride_f: usize, pad: FreqPad) -> Vec<f64> {
        let (ci, fi, tl) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, _, kf, kt) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let (pad_l, fo) = pad.resolve(fi, kf, stride_f);
        let pad_r = ((fo - 1) * stride_f + kf).saturating_sub(fi + pad_l);
        let fp = fi + pad_l + pad_r;
        let tp = tl + kt - 1; // kt-1 zeros strictly in the past
        let mut padded = vec![0.0; ci * fp * tp];
        for c in 0..ci {
            for f in 0..fi {
                for t in 0..tl {
                    padded[c * fp * tp + (f + pad_l) * tp + (t + kt - 1)] =
                        x.data()[c * fi * tl + f * tl + t];
                }
            }
        }
        let mut out = vec![0.0; co * fo * tl];
        for o in 0..co {
            for f in 0..fo {
                for t in 0..tl {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for a in 0..kf {
                            for b in 0..kt {
                                acc += padded[c * fp * tp + (f * stride_f + a) * tp + (t + b)]
                                    * w.data()[((o * ci + c) * kf + a) * kt + b];
                            }
                        }
                    }
                    out[o * fo * tl + f * tl + t] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_all_ones_kernel_interior_equals_six() {
        // all-ones 1x3x2 kernel over constant-1 input 1x4x4: interior = 6
        let x = Tensor::<f64>::filled(&[1, 4, 4], 1.0);
        let w = Tensor::<f64>::filled(&[1, 1, 3, 2], 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, 1, FreqPad::Same).unwrap();
        let out = tape.value(y).data().to_vec();
        // interior: frequency rows 1..3 (away from freq pad), time >= 1
        for f in 1..3 {
            for t in 1..4 {
                assert_eq!(out[f * 4 + t], 6.0, "f={f} t={t}");
            }
        }
        assert_eq!(out, conv_oracle(&x, &w, 1, FreqPad::Same));
    }

    #[test]
    fn conv2d_matches_direct_summation_oracle() {
        let mut rng = Rng::new(4);
        for &(stride, pad, kf, kt) in &[
            (2usize, FreqPad::Same, 5usize, 2usize),
            (1, FreqPad::Same, 3, 2),
            (1, FreqPad::Valid, 2, 1),
        ] {
            let x = rand_tensor(&[2, 8, 5], &mut rng);
            let w = rand_tensor(&[3, 2, kf, kt], &mut rng);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let y = tape.conv2d(xv, wv, stride, pad).unwrap();
            let oracle = conv_oracle(&x, &w, stride, pad);
            for (a, b) in tape.value(y).data().iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_is_causal_in_time() {
        // perturbing input frame t changes outputs only at frames >= t
        let mut rng = Rng::new(5);
        let x = rand_tensor(&[2, 6, 7], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 2], &mut rng);
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(input.clone());
            let wv = tape.constant(w.clone());
            let y = tape.conv2d(xv, wv, 1, FreqPad::Same).unwrap();
            tape.value(y).data().to_vec()
        };
        let base = run(&x);
        let t_perturb = 3;
        let mut data = x.data().to_vec();
        for c in 0..2 {
            for f in 0..6 {
                data[c * 6 * 7 + f * 7 + t_perturb] += 0.5;
            }
        }
        let perturbed = run(&Tensor::from_vec(vec![2, 6, 7], data).unwrap());
        let t_len = 7;
        for (i, (a, b)) in base.iter().zip(perturbed.iter()).enumerate() {
            if i % t_len < t_perturb {
                assert_eq!(a, b, "output before frame {t_perturb} changed at {i}");
            }
        }
        assert!(base.iter().zip(perturbed.iter()).any(|(a, b)| a != b));
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = Rng::new(6);
        let x = rand_tensor(&[2, 6, 4], &mut rng);
        let w = rand_tensor(&[3, 2, 5, 2], &mut rng);
        check_grads(
            &[x, w],
            |tape, vs| {
                let y = tape.conv2d(vs[0], vs[1], 2, FreqPad::Same).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn conv2d_transpose_one_by_one_identity() {
        let mut rng = Rng::new(7);
        let y = rand_tensor(&[1, 4, 5], &mut rng);
        let mut tape = Tape::<f64>::new();
        let yv = tape.constant(y.clone());
        let w = tape.constant(Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let out = tape.conv2d_transpose(yv, w, 1, FreqPad::Same, 4).unwrap();
        assert_eq!(tape.value(out).data(), y.data());
    }

    #[test]
    fn conv2d_transpose_restores_encoder_extent() {
        // mirror of a (5,2) kernel stride (2,1) layer: 128 -> 256
        let mut rng = Rng::new(8);
        let y = rand_tensor(&[3, 128, 2], &mut rng);
        let w = rand_tensor(&[3, 2, 5, 2], &mut rng);
        let mut tape = Tape::new();
        let yv = tape.constant(y);
        let wv = tape.constant(w);
        let out = tape
            .conv2d_transpose(yv, wv, 2, FreqPad::Same, 256)
            .unwrap();
        assert_eq!(tape.shape(out), &[2, 256, 2]);
        // inconsistent declared extent is a dimension error
        let bad = tape.conv2d_transpose(yv, wv, 2, FreqPad::Same, 250);
        assert!(bad.is_err());
    }

    /// Adjoint identity. Both ops use causal time windows, so the exact
    /// relation is <conv(x), y> = <x, rev_t(convT(rev_t(y)))>; for kT = 1 the
    /// time reversal is a no-op and the plain identity holds.
    #[test]
    fn conv_pair_satisfies_adjoint_identity() {
        let mut rng = Rng::new(9);
        // shapes drawn from the actual encoder/decoder configurations
        let configs: &[(usize, usize, usize, usize, usize, usize, FreqPad)] = &[
            // (c_in, c_out, f_in, t, kf, kt, pad) with stride from tuple below
            (2, 16, 32, 4, 5, 2, FreqPad::Same),
            (16, 32, 16, 4, 3, 2, FreqPad::Same),
            (64, 80, 16, 4, 2, 1, FreqPad::Valid),
        ];
        let strides = [2usize, 1, 1];
        for (ci, &(c_in, c_out, f_in, t_len, kf, kt, pad)) in configs.iter().enumerate() {
            let stride = strides[ci];
            let x = rand_tensor(&[c_in, f_in, t_len], &mut rng);
            let w = rand_tensor(&[c_out, c_in, kf, kt], &mut rng);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let yv = tape.conv2d(xv, wv, stride, pad).unwrap();
            let f_out = tape.shape(yv)[1];
            let y = rand_tensor(&[c_out, f_out, t_len], &mut rng);
            let lhs: f64 = tape
                .value(yv)
                .data()
                .iter()
                .zip(y.data().iter())
                .map(|(a, b)| a * b)
                .sum();

            let rev_t = |t: &Tensor<f64>| {
                let s = t.shape().to_vec();
                let (c, f, tl) = (s[0], s[1], s[2]);
                let mut out = vec![0.0; t.numel()];
                for ci in 0..c {
                    for fi in 0..f {
                        for ti in 0..tl {
                            out[ci * f * tl + fi * tl + ti] =
                                t.data()[ci * f * tl + fi * tl + (tl - 1 - ti)];
                        }
                    }
                }
                Tensor::from_vec(s, out).unwrap()
            };
            // the transposed op's [Cin_T, Cout_T, kf, kt] layout is the conv
            // weight's [Cout, Cin, kf, kt] buffer relabeled
            let wt = Tensor::from_vec(vec![c_out, c_in, kf, kt], w.data().to_vec()).unwrap();
            let mut tape2 = Tape::new();
            let y_in = tape2.constant(rev_t(&y));
            let wv2 = tape2.constant(wt);
            let back = tape2
                .conv2d_transpose(y_in, wv2, stride, pad, f_in)
                .unwrap();
            let back_rev = rev_t(tape2.value(back));
            let rhs: f64 = x
                .data()
                .iter()
                .zip(back_rev.data().iter())
                .map(|(a, b)| a * b)
                .sum();
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
            assert!(
                rel < 1e-12,
                "adjoint identity rel err {rel} for config {ci}"
            );
        }
    }

    #[test]
    fn conv2d_transpose_is_causal_and_gradients_match() {
        let mut rng = Rng::new(10);
        let y = rand_tensor(&[3, 8, 6], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 2], &mut rng);
        // causality
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::new();
            let yv = tape.constant(input.clone());
            let wv = tape.constant(w.clone());
            let out = tape.conv2d_transpose(yv, wv, 1, FreqPad::Same, 8).unwrap();
            tape.value(out).data().to_vec()
        };
        let base = run(&y);
        let mut data = y.data().to_vec();
        let t_perturb = 2;
        for c in 0..3 {
            for f in 0..8 {
                data[c * 8 * 6 + f * 6 + t_perturb] += 1.0;
            }
        }
        let perturbed = run(&Tensor::from_vec(vec![3, 8, 6], data).unwrap());
        for (i, (a, b)) in base.iter().zip(perturbed.iter()).enumerate() {
            if i % 6 < t_perturb {
                assert_eq!(a, b);
            }
        }
        // gradients
        check_grads(
            &[y, w],
            |tape, vs| {
                let out = tape
                    .conv2d_transpose(vs[0], vs[1], 1, FreqPad::Same, 8)
                    .unwrap();
                let sq = tape.mul(out, out).unwrap();
                tape.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_uniform_and_saturated_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax_last(x);
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::from_vec(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax_last(x);
        let out = tape.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-12 && out[1].abs() < 1e-12);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_is_shift_invariant_and_gradients_match() {
        let mut rng = Rng::new(12);
        let x = rand_tensor(&[4, 5], &mut rng);
        let shifted = x.map(|v| v + 3.7);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(shifted);
        let ya = tape.softmax_last(a);
        let yb = tape.softmax_last(b);
        for (u, v) in tape
            .value(ya)
            .data()
            .iter()
            .zip(tape.value(yb).data().iter())
        {
            assert!((u - v).abs() < 1e-12);
        }
        for row in tape.value(ya).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        check_grads(
            &[x],
            |tape, vs| {
                let y = tape.softmax_last(vs[0]);
                let sq = tape.mul(y, y).unwrap();
                tape.sum(sq)
            },
            1e-6,
        );
        // arbitrary-axis path
        let x = rand_tensor(&[3, 4, 5], &mut rng);
        check_grads(
            &[x],
            |tape, vs| {
                let y = tape.softmax(vs[0], 1).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn elementwise_trivial_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        // prelu with slope 1 is the identity
        let x = tape.constant(
            Tensor::from_vec(vec![2, 3], vec![-1.0, 0.5, -0.25, 2.0, -3.0, 0.0]).unwrap(),
        );
        let ones = tape.constant(Tensor::filled(&[2], 1.0));
        let y = tape.prelu(x, ones).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = Rng::new(13);
        let x = rand_tensor(&[2, 3, 4], &mut rng);
        let s = rand_tensor(&[2], &mut rng);
        check_grads(
            &[x.clone(), s],
            |tape, vs| {
                let y = tape.prelu(vs[0], vs[1]).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum(sq)
            },
            1e-6,
        );
        check_grads(
            std::slice::from_ref(&x),
            |tape, vs| {
                let a = tape.sigmoid(vs[0]);
                let b = tape.tanh(a);
                let c = tape.scale(b, 2.5);
                tape.sum(c)
            },
            1e-6,
        );
        // sqrt/pow/clamp chain on strictly positive values
        let pos = x.map(|v| v.abs() + 0.5);
        check_grads(
            &[pos],
            |tape, vs| {
                let c = tape.clamp_min(vs[0], 0.25);
                let r = tape.sqrt(c);
                let p = tape.pow_const(r, 2.0 / 3.0);
                tape.sum(p)
            },
            1e-5,
        );
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        check_grads(
            &[a, b],
            |tape, vs| {
                let y = tape.add_broadcast(vs[0], vs[1]).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum(sq)
            },
            1e-6,
        );
        let x = rand_tensor(&[3, 2, 4], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        check_grads(
            &[x, b],
            |tape, vs| {
                let y = tape.add_channel_bias(vs[0], vs[1]).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = Rng::new(14);
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[2, 2, 4], &mut rng);
        check_grads(
            &[a.clone(), b],
            |tape, vs| {
                let y = tape.concat(&[vs[0], vs[1]], 1).unwrap();
                let s = tape.slice(y, 1, 1, 3).unwrap();
                let p = tape.permute3(s, [2, 0, 1]).unwrap();
                let r = tape.reshape(p, vec![4, 6]).unwrap();
                let sq = tape.mul(r, r).unwrap();
                tape.sum(sq)
            },
            1e-6,
        );
        check_grads(
            &[a],
            |tape, vs| {
                let y = tape.sub(vs[0], vs[0]).unwrap();
                let z = tape.add(y, vs[0]).unwrap();
                let sq = tape.mul(z, z).unwrap();
                tape.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn instance_norm_constant_input_gives_affine_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(&[2, 5, 3], 4.2));
        let gamma = tape.constant(Tensor::filled(&[3], 2.0));
        let beta = tape.constant(Tensor::from_vec(vec![3], vec![0.5, -1.0, 7.0]).unwrap());
        let y = tape.instance_norm(x, gamma, beta, 1e-8).unwrap();
        // constant over the normalized axis: centered to zero, affine leaves beta
        for t in 0..2 {
            for f in 0..5 {
                for c in 0..3 {
                    let v = tape.value(y).data()[t * 15 + f * 3 + c];
                    let expect = [0.5, -1.0, 7.0][c];
                    assert!((v - expect).abs() < 1e-6, "got {v} want {expect}");
                }
            }
        }
    }

    #[test]
    fn instance_norm_normalizes_per_frame_channel() {
        let mut rng = Rng::new(15);
        let x = rand_tensor(&[3, 7, 2], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let gamma = tape.constant(Tensor::filled(&[2], 1.0));
        let beta = tape.constant(Tensor::zeros(&[2]));
        let y = tape.instance_norm(xv, gamma, beta, 1e-8).unwrap();
        let out = tape.value(y).data();
        for t in 0..3 {
            for c in 0..2 {
                let vals: Vec<f64> = (0..7).map(|f| out[t * 14 + f * 2 + c]).collect();
                let mean: f64 = vals.iter().sum::<f64>() / 7.0;
                let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 7.0;
                assert!(mean.abs() < 1e-9, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-6, "var {var}");
            }
        }
    }

    #[test]
    fn instance_norm_gradients_match_finite_differences() {
        let mut rng = Rng::new(16);
        let x = rand_tensor(&[2, 5, 3], &mut rng);
        let gamma = rand_tensor(&[3], &mut rng);
        let beta = rand_tensor(&[3], &mut rng);
        check_grads(
            &[x, gamma, beta],
            |tape, vs| {
                let y = tape.instance_norm(vs[0], vs[1], vs[2], 1e-8).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn batch_norm_training_and_inference_gradients() {
        let mut rng = Rng::new(17);
        let x = rand_tensor(&[3, 4, 2], &mut rng);
        let gamma = rand_tensor(&[3], &mut rng);
        let beta = rand_tensor(&[3], &mut rng);
        check_grads(
            &[x.clone(), gamma.clone(), beta.clone()],
            |tape, vs| {
                let y = tape
                    .batch_norm(vs[0], vs[1], vs[2], 1e-5, BnMode::Batch)
                    .unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum(sq)
            },
            1e-5,
        );
        let mean = Arc::new(vec![0.1, -0.2, 0.3]);
        let var = Arc::new(vec![1.5, 0.7, 2.0]);
        check_grads(
            &[x, gamma, beta],
            |tape, vs| {
                let y = tape
                    .batch_norm(
                        vs[0],
                        vs[1],
                        vs[2],
                        1e-5,
                        BnMode::Running {
                            mean: mean.clone(),
                            var: var.clone(),
                        },
                    )
                    .unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn batch_norm_training_normalizes_per_channel() {
        let mut rng = Rng::new(18);
        let x = rand_tensor(&[2, 3, 4], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let gamma = tape.constant(Tensor::filled(&[2], 1.0));
        let beta = tape.constant(Tensor::zeros(&[2]));
        let y = tape
            .batch_norm(xv, gamma, beta, 1e-5, BnMode::Batch)
            .unwrap();
        let out = tape.value(y).data();
        for c in 0..2 {
            let slab = &out[c * 12..(c + 1) * 12];
            let mean: f64 = slab.iter().sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-9);
        }
        let (m, v) = tape.batch_stats(y).unwrap();
        assert_eq!(m.len(), 2);
        assert!(v.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn lstm_cell_zero_weights_zero_state() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(&[1, 3], 0.7));
        let h = tape.constant(Tensor::zeros(&[1, 2]));
        let c = tape.constant(Tensor::zeros(&[1, 2]));
        let w = tape.constant(Tensor::zeros(&[8, 5]));
        let b = tape.constant(Tensor::zeros(&[8]));
        let (h2, c2) = lstm_cell(&mut tape, x, h, c, w, b).unwrap();
        assert!(tape.value(h2).data().iter().all(|v| *v == 0.0));
        assert!(tape.value(c2).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lstm_cell_state_growth_is_bounded() {
        // |c'| <= |c| + 1 elementwise: gates in (0,1), tanh in (-1,1)
        let mut rng = Rng::new(19);
        for _ in 0..10 {
            let mut tape = Tape::<f64>::new();
            let c_data = Tensor::uniform(&[2, 3], 5.0, &mut rng);
            let x = tape.constant(Tensor::uniform(&[2, 4], 3.0, &mut rng));
            let h = tape.constant(Tensor::uniform(&[2, 3], 3.0, &mut rng));
            let c = tape.constant(c_data.clone());
            let w = tape.constant(Tensor::uniform(&[12, 7], 2.0, &mut rng));
            let b = tape.constant(Tensor::uniform(&[12], 2.0, &mut rng));
            let (_, c2) = lstm_cell(&mut tape, x, h, c, w, b).unwrap();
            for (after, before) in tape.value(c2).data().iter().zip(c_data.data().iter()) {
                assert!(after.abs() <= before.abs() + 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn lstm_cell_gradients_match_finite_differences() {
        let mut rng = Rng::new(20);
        let x = rand_tensor(&[2, 3], &mut rng);
        let h = rand_tensor(&[2, 4], &mut rng);
        let c = rand_tensor(&[2, 4], &mut rng);
        let w = rand_tensor(&[16, 7], &mut rng);
        let b = rand_tensor(&[16], &mut rng);
        check_grads(
            &[x, h, c, w, b],
            |tape, vs| {
                let (h2, _) = lstm_cell(tape, vs[0], vs[1], vs[2], vs[3], vs[4]).unwrap();
                tape.sum(h2)
            },
            1e-5,
        );
    }

    #[test]
    fn lstm_seq_matches_composite_cell_chain() {
        // dual-route check: the fused sequence op against a chain of
        // primitive-op cells, forward values and parameter gradients
        let mut rng = Rng::new(21);
        let t_len = 4;
        let x = rand_tensor(&[t_len, 2, 3], &mut rng);
        let w = rand_tensor(&[16, 7], &mut rng);
        let b = rand_tensor(&[16], &mut rng);

        let mut fused = Tape::<f64>::new();
        let xv = fused.leaf(x.clone(), true);
        let wv = fused.leaf(w.clone(), true);
        let bv = fused.leaf(b.clone(), true);
        let h0 = fused.constant(Tensor::zeros(&[2, 4]));
        let c0 = fused.constant(Tensor::zeros(&[2, 4]));
        let h_seq = fused.lstm_seq(xv, wv, bv, h0, c0).unwrap();
        let sq = fused.mul(h_seq, h_seq).unwrap();
        let loss = fused.sum(sq);
        fused.backward(loss).unwrap();

        let mut chain = Tape::<f64>::new();
        let xv2 = chain.leaf(x.clone(), true);
        let wv2 = chain.leaf(w.clone(), true);
        let bv2 = chain.leaf(b.clone(), true);
        let mut h = chain.constant(Tensor::zeros(&[2, 4]));
        let mut c = chain.constant(Tensor::zeros(&[2, 4]));
        let mut hs = Vec::new();
        for t in 0..t_len {
            let x_t = chain.slice(xv2, 0, t, 1).unwrap();
            let x_t = chain.reshape(x_t, vec![2, 3]).unwrap();
            let (h2, c2) = lstm_cell(&mut chain, x_t, h, c, wv2, bv2).unwrap();
            h = h2;
            c = c2;
            let h3 = chain.reshape(h2, vec![1, 2, 4]).unwrap();
            hs.push(h3);
        }
        let h_all = chain.concat(&hs, 0).unwrap();
        let sq2 = chain.mul(h_all, h_all).unwrap();
        let loss2 = chain.sum(sq2);
        chain.backward(loss2).unwrap();

        for (a, b) in fused
            .value(h_seq)
            .data()
            .iter()
            .zip(chain.value(h_all).data().iter())
        {
            assert!((a - b).abs() < 1e-12);
        }
        for (va, vb) in [(xv, xv2), (wv, wv2), (bv, bv2)] {
            let ga = fused.grad(va).unwrap();
            let gb = chain.grad(vb).unwrap();
            for (a, b) in ga.data().iter().zip(gb.data().iter()) {
                assert!((a - b).abs() < 1e-9, "fused {a} vs chain {b}");
            }
        }
    }

    #[test]
    fn lstm_seq_gradients_match_finite_differences() {
        let mut rng = Rng::new(22);
        let x = rand_tensor(&[3, 2, 3], &mut rng);
        let w = rand_tensor(&[8, 5], &mut rng);
        let b = rand_tensor(&[8], &mut rng);
        let h0 = rand_tensor(&[2, 2], &mut rng);
        let c0 = rand_tensor(&[2, 2], &mut rng);
        check_grads(
            &[x, w, b, h0, c0],
            |tape, vs| {
                let h = tape.lstm_seq(vs[0], vs[1], vs[2], vs[3], vs[4]).unwrap();
                let sq = tape.mul(h, h).unwrap();
                tape.sum(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // backward(a*f + b*g) = a*backward(f) + b*backward(g) on shared leaves
        let mut rng = Rng::new(23);
        let x = rand_tensor(&[3, 3], &mut rng);
        let grad_of = |alpha: f64, beta: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let f = tape.mul(xv, xv).unwrap();
            let f = tape.sum(f);
            let g = tape.sigmoid(xv);
            let g = tape.sum(g);
            let fa = tape.scale(f, alpha);
            let gb = tape.scale(g, beta);
            let loss = tape.add(fa, gb).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(xv).unwrap().data().to_vec()
        };
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        let combined = grad_of(2.0, -3.0);
        for i in 0..combined.len() {
            assert!((combined[i] - (2.0 * gf[i] - 3.0 * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_inputs_give_bit_identical_outputs() {
        let mut rng = Rng::new(24);
        let x = rand_tensor(&[4, 4], &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let s = tape.sigmoid(xv);
            let m = tape.matmul(s, s).unwrap();
            let sm = tape.softmax_last(m);
            tape.value(sm).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
