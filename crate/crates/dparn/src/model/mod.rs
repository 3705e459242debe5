//! The dual-path attention-recurrent enhancement network.
//!
//! Signal path: learnable spectral compression of both complex planes,
//! a strided 2-D convolutional encoder, a dual-path block (multi-head
//! self-attention across frequency within each frame, an LSTM across time
//! for each frequency), and twin transposed-convolution decoders with
//! skip concatenation, one per complex plane, each followed by its own
//! learnable inverse compression. Every time-mixing stage is causal, so
//! output frame t never depends on input frames after t.

pub mod weights;

use crate::dsp::ComplexSpectrogram;
use crate::error::{dim_err, DparnError, Result};
use crate::rng::Rng;
use crate::scm::{IscmMatrix, ScmMatrix};
use crate::tensor::kernels::FreqPad;
use crate::tensor::tape::{linear, BnMode, Tape, Var};
use crate::tensor::{ParamId, ParamSet, Parameter, Scalar, Tensor};

/// Batch-norm running statistics update factor (training mode).
pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;
pub const IN_EPS: f64 = 1e-8;
/// PReLU negative-slope initialization.
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Full-band frequency bins (601).
    pub f_bins: usize,
    /// Compressed bins after the mapping layer.
    pub compressed: usize,
    /// Identity rows of the compression matrix (bins kept verbatim).
    pub low_band: usize,
    pub encoder_channels: Vec<usize>,
    /// (freq, time) kernel per encoder layer.
    pub encoder_kernels: Vec<(usize, usize)>,
    /// (freq, time) stride per encoder layer; time stride must be 1.
    pub encoder_strides: Vec<(usize, usize)>,
    /// Attention blocks in the intra path.
    pub mha_blocks: usize,
    pub heads: usize,
    pub lstm_hidden: usize,
}

impl ModelConfig {
    /// Full-size configuration of the 48 kHz enhancement network.
    pub fn canonical() -> Self {
        ModelConfig {
            f_bins: crate::dsp::FULL_BINS,
            compressed: 256,
            low_band: 125,
            encoder_channels: vec![16, 32, 48, 64, 80],
            encoder_kernels: vec![(5, 2), (3, 2), (3, 2), (3, 2), (2, 1)],
            encoder_strides: vec![(2, 1), (1, 1), (1, 1), (1, 1), (1, 1)],
            mha_blocks: 2,
            heads: 8,
            lstm_hidden: 127,
        }
    }

    /// Desk-scale configuration for training experiments and gradient
    /// checks: C=16, H=4, B=1, 32 compressed bins.
    pub fn reduced() -> Self {
        let mut cfg = ModelConfig {
            f_bins: crate::dsp::FULL_BINS,
            compressed: 32,
            low_band: 16,
            encoder_channels: vec![4, 8, 16],
            encoder_kernels: vec![(5, 2), (3, 2), (2, 1)],
            encoder_strides: vec![(2, 1), (1, 1), (1, 1)],
            mha_blocks: 1,
            heads: 4,
            lstm_hidden: 0,
        };
        cfg.lstm_hidden = cfg.f_prime();
        cfg
    }

    pub fn channels(&self) -> usize {
        *self.encoder_channels.last().expect("encoder layers")
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    /// Frequency padding: "same" everywhere except the final (valid)
    /// encoder layer, whose kernel trims the extent by kF - 1.
    pub fn pad_mode(&self, layer: usize) -> FreqPad {
        if layer + 1 == self.encoder_channels.len() {
            FreqPad::Valid
        } else {
            FreqPad::Same
        }
    }

    /// Frequency extents through the encoder, starting at `compressed`.
    pub fn freq_trace(&self) -> Vec<usize> {
        let mut trace = vec![self.compressed];
        let mut f = self.compressed;
        for i in 0..self.encoder_channels.len() {
            let (kf, _) = self.encoder_kernels[i];
            let (sf, _) = self.encoder_strides[i];
            let (_, out) = self.pad_mode(i).resolve(f, kf, sf);
            f = out;
            trace.push(f);
        }
        trace
    }

    /// Frequency extent entering the dual-path block.
    pub fn f_prime(&self) -> usize {
        *self.freq_trace().last().expect("trace")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.encoder_channels.len();
        if n == 0 || self.encoder_kernels.len() != n || self.encoder_strides.len() != n {
            return Err(DparnError::Config("encoder layer lists disagree".into()));
        }
        if self.encoder_strides.iter().any(|&(_, st)| st != 1) {
            return Err(DparnError::Config(
                "time stride must be 1 to preserve the frame count".into(),
            ));
        }
        if !self.channels().is_multiple_of(self.heads) {
            return Err(DparnError::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels(),
                self.heads
            )));
        }
        if self.low_band >= self.compressed || self.compressed >= self.f_bins {
            return Err(DparnError::Config("band sizes out of order".into()));
        }
        Ok(())
    }
}

/// Sinusoidal positional encoding over frequency positions: even columns
/// sin(p / 10000^(2i/C)), odd columns cos of the same angle.
pub fn positional_encoding<T: Scalar>(positions: usize, channels: usize) -> Tensor<T> {
    assert!(
        channels.is_multiple_of(2),
        "positional encoding needs even channels"
    );
    let mut data = vec![T::ZERO; positions * channels];
    for p in 0..positions {
        for i in 0..channels / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / channels as f64);
            data[p * channels + 2 * i] = T::from_f64(angle.sin());
            data[p * channels + 2 * i + 1] = T::from_f64(angle.cos());
        }
    }
    Tensor::from_vec(vec![positions, channels], data).expect("pe shape")
}

struct ConvLayer {
    w: ParamId,
    b: ParamId,
    bn_gamma: ParamId,
    bn_beta: ParamId,
    bn_mean: ParamId,
    bn_var: ParamId,
    prelu: ParamId,
    stride_f: usize,
    pad: FreqPad,
    /// Target output frequency extent (transposed layers only).
    out_f: usize,
}

struct MhaBlock {
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

struct IntraPath {
    blocks: Vec<MhaBlock>,
    fc_w: ParamId,
    fc_b: ParamId,
    norm_gamma: ParamId,
    norm_beta: ParamId,
}

struct InterPath {
    lstm_w: ParamId,
    lstm_b: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
    norm_gamma: ParamId,
    norm_beta: ParamId,
}

struct DecoderPath {
    layers: Vec<ConvLayer>,
    iscm: ParamId,
}

/// The full model: configuration plus a flat, named parameter set.
pub struct DparnModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    scm_low: ParamId,
    scm_high: ParamId,
    encoder: Vec<ConvLayer>,
    intra: IntraPath,
    inter: InterPath,
    decoder_re: DecoderPath,
    decoder_im: DecoderPath,
    pe: Tensor<T>,
}

/// Everything a forward pass exposes to its caller.
pub struct ForwardOutput {
    /// Estimated real plane, `[frames, f_bins]`.
    pub re: Var,
    /// Estimated imaginary plane, `[frames, f_bins]`.
    pub im: Var,
    /// Training-mode batch-norm nodes: (running-mean id, running-var id,
    /// node) so the trainer can fold batch statistics into running ones.
    pub bn_nodes: Vec<(ParamId, ParamId, Var)>,
}

impl<T: Scalar> DparnModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        let uniform =
            |params: &mut ParamSet<T>, name: String, shape: &[usize], bound: f64, rng: &mut Rng| {
                params.add(Parameter::new(
                    name,
                    Tensor::uniform(shape, bound, rng),
                    true,
                ))
            };

        // compression mapping: frozen identity rows + trainable triangles
        let scm = ScmMatrix::build_init(config.f_bins, config.compressed, config.low_band);
        let scm_low = params.add(Parameter::new("scm.low", scm.low_tensor::<T>(), false));
        let scm_high = params.add(Parameter::new("scm.high", scm.high_tensor::<T>(), true));

        // encoder
        let mut encoder = Vec::new();
        let mut c_in = 2usize;
        for (i, &c_out) in config.encoder_channels.iter().enumerate() {
            let (kf, kt) = config.encoder_kernels[i];
            let (sf, _) = config.encoder_strides[i];
            let bound = (1.0 / (c_in * kf * kt) as f64).sqrt();
            let w = uniform(
                &mut params,
                format!("enc{i}.w"),
                &[c_out, c_in, kf, kt],
                bound,
                &mut rng,
            );
            let b = uniform(&mut params, format!("enc{i}.b"), &[c_out], bound, &mut rng);
            let layer = Self::norm_and_activation(&mut params, &format!("enc{i}"), c_out, &mut rng);
            encoder.push(ConvLayer {
                w,
                b,
                bn_gamma: layer.0,
                bn_beta: layer.1,
                bn_mean: layer.2,
                bn_var: layer.3,
                prelu: layer.4,
                stride_f: sf,
                pad: config.pad_mode(i),
                out_f: 0,
            });
            c_in = c_out;
        }

        // intra path: attention blocks, terminal FC, instance norm
        let c = config.channels();
        let d = config.head_dim();
        let mut blocks = Vec::new();
        for bi in 0..config.mha_blocks {
            let proj_bound = (1.0 / c as f64).sqrt();
            let mut wq = Vec::new();
            let mut wk = Vec::new();
            let mut wv = Vec::new();
            for h in 0..config.heads {
                wq.push(uniform(
                    &mut params,
                    format!("intra.block{bi}.head{h}.wq"),
                    &[c, d],
                    proj_bound,
                    &mut rng,
                ));
                wk.push(uniform(
                    &mut params,
                    format!("intra.block{bi}.head{h}.wk"),
                    &[c, d],
                    proj_bound,
                    &mut rng,
                ));
                wv.push(uniform(
                    &mut params,
                    format!("intra.block{bi}.head{h}.wv"),
                    &[c, d],
                    proj_bound,
                    &mut rng,
                ));
            }
            let wo_bound = (1.0 / (config.heads * d) as f64).sqrt();
            let wo = uniform(
                &mut params,
                format!("intra.block{bi}.wo"),
                &[config.heads * d, c],
                wo_bound,
                &mut rng,
            );
            let ffn_bound = (1.0 / c as f64).sqrt();
            let ffn_w1 = uniform(
                &mut params,
                format!("intra.block{bi}.ffn.w1"),
                &[c, 4 * c],
                ffn_bound,
                &mut rng,
            );
            let ffn_b1 = uniform(
                &mut params,
                format!("intra.block{bi}.ffn.b1"),
                &[4 * c],
                ffn_bound,
                &mut rng,
            );
            let ffn2_bound = (1.0 / (4 * c) as f64).sqrt();
            let ffn_w2 = uniform(
                &mut params,
                format!("intra.block{bi}.ffn.w2"),
                &[4 * c, c],
                ffn2_bound,
                &mut rng,
            );
            let ffn_b2 = uniform(
                &mut params,
                format!("intra.block{bi}.ffn.b2"),
                &[c],
                ffn2_bound,
                &mut rng,
            );
            blocks.push(MhaBlock {
                wq,
                wk,
                wv,
                wo,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
            });
        }
        let fc_bound = (1.0 / c as f64).sqrt();
        let intra = IntraPath {
            blocks,
            fc_w: uniform(
                &mut params,
                "intra.fc.w".into(),
                &[c, c],
                fc_bound,
                &mut rng,
            ),
            fc_b: uniform(&mut params, "intra.fc.b".into(), &[c], fc_bound, &mut rng),
            norm_gamma: params.add(Parameter::new(
                "intra.norm.gamma",
                Tensor::filled(&[c], T::ONE),
                true,
            )),
            norm_beta: params.add(Parameter::new("intra.norm.beta", Tensor::zeros(&[c]), true)),
        };

        // inter path: LSTM over time per frequency, FC back to C, norm
        let hd = config.lstm_hidden;
        let lstm_bound = (1.0 / hd as f64).sqrt();
        let inter = InterPath {
            lstm_w: uniform(
                &mut params,
                "inter.lstm.w".into(),
                &[4 * hd, c + hd],
                lstm_bound,
                &mut rng,
            ),
            lstm_b: uniform(
                &mut params,
                "inter.lstm.b".into(),
                &[4 * hd],
                lstm_bound,
                &mut rng,
            ),
            fc_w: uniform(
                &mut params,
                "inter.fc.w".into(),
                &[hd, c],
                (1.0 / hd as f64).sqrt(),
                &mut rng,
            ),
            fc_b: uniform(
                &mut params,
                "inter.fc.b".into(),
                &[c],
                (1.0 / hd as f64).sqrt(),
                &mut rng,
            ),
            norm_gamma: params.add(Parameter::new(
                "inter.norm.gamma",
                Tensor::filled(&[c], T::ONE),
                true,
            )),
            norm_beta: params.add(Parameter::new("inter.norm.beta", Tensor::zeros(&[c]), true)),
        };

        // twin decoders
        let trace = config.freq_trace();
        let build_decoder =
            |prefix: &str, params: &mut ParamSet<T>, rng: &mut Rng| -> DecoderPath {
                let n = config.encoder_channels.len();
                let mut layers = Vec::new();
                let mut c_prev = config.channels();
                for i in 0..n {
                    let mirror = n - 1 - i;
                    let c_skip = config.encoder_channels[mirror];
                    let c_in = c_prev + c_skip;
                    let c_out = if mirror == 0 {
                        1
                    } else {
                        config.encoder_channels[mirror - 1]
                    };
                    let (kf, kt) = config.encoder_kernels[mirror];
                    let (sf, _) = config.encoder_strides[mirror];
                    let bound = (1.0 / (c_in * kf * kt) as f64).sqrt();
                    let w = uniform(
                        params,
                        format!("{prefix}{i}.w"),
                        &[c_in, c_out, kf, kt],
                        bound,
                        rng,
                    );
                    let b = uniform(params, format!("{prefix}{i}.b"), &[c_out], bound, rng);
                    let norm =
                        Self::norm_and_activation(params, &format!("{prefix}{i}"), c_out, rng);
                    layers.push(ConvLayer {
                        w,
                        b,
                        bn_gamma: norm.0,
                        bn_beta: norm.1,
                        bn_mean: norm.2,
                        bn_var: norm.3,
                        prelu: norm.4,
                        stride_f: sf,
                        pad: config.pad_mode(mirror),
                        out_f: trace[mirror],
                    });
                    c_prev = c_out;
                }
                let iscm = IscmMatrix::random_init(config.f_bins, config.compressed, rng);
                let iscm = params.add(Parameter::new(
                    format!("{prefix}.iscm"),
                    iscm.tensor::<T>(),
                    true,
                ));
                DecoderPath { layers, iscm }
            };
        let decoder_re = build_decoder("dec_re", &mut params, &mut rng);
        let decoder_im = build_decoder("dec_im", &mut params, &mut rng);

        let pe = positional_encoding::<T>(config.f_prime(), c);
        Ok(DparnModel {
            config,
            params,
            scm_low,
            scm_high,
            encoder,
            intra,
            inter,
            decoder_re,
            decoder_im,
            pe,
        })
    }

    fn norm_and_activation(
        params: &mut ParamSet<T>,
        prefix: &str,
        channels: usize,
        rng: &mut Rng,
    ) -> (ParamId, ParamId, ParamId, ParamId, ParamId) {
        let _ = rng;
        let gamma = params.add(Parameter::new(
            format!("{prefix}.bn.gamma"),
            Tensor::filled(&[channels], T::ONE),
            true,
        ));
        let beta = params.add(Parameter::new(
            format!("{prefix}.bn.beta"),
            Tensor::zeros(&[channels]),
            true,
        ));
        let mean = params.add(Parameter::new(
            format!("{prefix}.bn.running_mean"),
            Tensor::zeros(&[channels]),
            false,
        ));
        let var = params.add(Parameter::new(
            format!("{prefix}.bn.running_var"),
            Tensor::filled(&[channels], T::ONE),
            false,
        ));
        let prelu = params.add(Parameter::new(
            format!("{prefix}.prelu"),
            Tensor::filled(&[channels], T::from_f64(PRELU_INIT)),
            true,
        ));
        (gamma, beta, mean, var, prelu)
    }

    pub fn num_trainable(&self) -> usize {
        self.params.num_trainable()
    }

    /// Bind every parameter as a tape leaf; index by ParamId.
    /// Gradients flow to trainable parameters only when `training`.
    pub fn bind(&self, tape: &mut Tape<T>, training: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, p)| tape.leaf(p.value.clone(), training && p.trainable))
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_stage(
        &self,
        tape: &mut Tape<T>,
        binds: &[Var],
        layer: &ConvLayer,
        x: Var,
        training: bool,
        transposed: bool,
        bn_nodes: &mut Vec<(ParamId, ParamId, Var)>,
    ) -> Result<Var> {
        let y = if transposed {
            tape.conv2d_transpose(x, binds[layer.w], layer.stride_f, layer.pad, layer.out_f)?
        } else {
            tape.conv2d(x, binds[layer.w], layer.stride_f, layer.pad)?
        };
        let y = tape.add_channel_bias(y, binds[layer.b])?;
        let mode = if training {
            BnMode::Batch
        } else {
            BnMode::Running {
                mean: std::sync::Arc::new(self.params.get(layer.bn_mean).value.data().to_vec()),
                var: std::sync::Arc::new(self.params.get(layer.bn_var).value.data().to_vec()),
            }
        };
        let y = tape.batch_norm(
            y,
            binds[layer.bn_gamma],
            binds[layer.bn_beta],
            T::from_f64(BN_EPS),
            mode,
        )?;
        if training {
            bn_nodes.push((layer.bn_mean, layer.bn_var, y));
        }
        tape.prelu(y, binds[layer.prelu])
    }

    /// Multi-head self-attention across frequency, applied independently
    /// per frame. Input and output are `[frames, f_prime, channels]`.
    fn mha(&self, tape: &mut Tape<T>, binds: &[Var], block: &MhaBlock, x: Var) -> Result<Var> {
        let d = self.config.head_dim();
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let q = linear(tape, x, binds[block.wq[h]], None)?;
            let k = linear(tape, x, binds[block.wk[h]], None)?;
            let v = linear(tape, x, binds[block.wv[h]], None)?;
            let scores = tape.bmm_nt(q, k)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_last(scores);
            heads.push(tape.bmm(attn, v)?);
        }
        let cat = tape.concat(&heads, 2)?;
        linear(tape, cat, binds[block.wo], None)
    }

    fn ffn(&self, tape: &mut Tape<T>, binds: &[Var], block: &MhaBlock, x: Var) -> Result<Var> {
        let h = linear(tape, x, binds[block.ffn_w1], Some(binds[block.ffn_b1]))?;
        let h = tape.relu(h);
        linear(tape, h, binds[block.ffn_w2], Some(binds[block.ffn_b2]))
    }

    /// The dual-path block on `[frames, f_prime, channels]` features.
    fn dual_path(&self, tape: &mut Tape<T>, binds: &[Var], u: Var) -> Result<Var> {
        // intra: positional encoding, B attention blocks with residuals,
        // FC -> IN, residual from the block input
        let pe = tape.constant(self.pe.clone());
        let mut v = tape.add_broadcast(u, pe)?;
        for block in &self.intra.blocks {
            let attn = self.mha(tape, binds, block, v)?;
            v = tape.add(v, attn)?;
            let f = self.ffn(tape, binds, block, v)?;
            v = tape.add(v, f)?;
        }
        let fc = linear(
            tape,
            v,
            binds[self.intra.fc_w],
            Some(binds[self.intra.fc_b]),
        )?;
        let normed = tape.instance_norm(
            fc,
            binds[self.intra.norm_gamma],
            binds[self.intra.norm_beta],
            T::from_f64(IN_EPS),
        )?;
        let intra_out = tape.add(normed, u)?;

        // inter: LSTM along time batched over frequency, FC -> IN, residual
        let f_prime = tape.shape(intra_out)[1];
        let hd = self.config.lstm_hidden;
        let h0 = tape.constant(Tensor::zeros(&[f_prime, hd]));
        let c0 = tape.constant(Tensor::zeros(&[f_prime, hd]));
        let h_seq = tape.lstm_seq(
            intra_out,
            binds[self.inter.lstm_w],
            binds[self.inter.lstm_b],
            h0,
            c0,
        )?;
        let fc2 = linear(
            tape,
            h_seq,
            binds[self.inter.fc_w],
            Some(binds[self.inter.fc_b]),
        )?;
        let normed2 = tape.instance_norm(
            fc2,
            binds[self.inter.norm_gamma],
            binds[self.inter.norm_beta],
            T::from_f64(IN_EPS),
        )?;
        tape.add(normed2, intra_out)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        tape: &mut Tape<T>,
        binds: &[Var],
        path: &DecoderPath,
        dp_cft: Var,
        skips: &[Var],
        frames: usize,
        training: bool,
        bn_nodes: &mut Vec<(ParamId, ParamId, Var)>,
    ) -> Result<Var> {
        let mut d = dp_cft;
        let n = self.encoder.len();
        for (i, layer) in path.layers.iter().enumerate() {
            let din = tape.concat(&[d, skips[n - 1 - i]], 0)?;
            d = self.conv_stage(tape, binds, layer, din, training, true, bn_nodes)?;
        }
        // [1, compressed, frames] -> [frames, compressed]
        let tf = tape.permute3(d, [0, 2, 1])?;
        let tf = tape.reshape(tf, vec![frames, self.config.compressed])?;
        tape.matmul_nt(tf, binds[path.iscm])
    }

    /// Build the full graph on `tape` for one spectrogram.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        binds: &[Var],
        spec: &ComplexSpectrogram<T>,
        training: bool,
    ) -> Result<ForwardOutput> {
        if spec.bins != self.config.f_bins || spec.frames == 0 {
            return dim_err("forward", &[spec.frames, spec.bins], &[self.config.f_bins]);
        }
        let frames = spec.frames;
        let mut bn_nodes = Vec::new();

        let x_re = tape.constant(spec.re_tensor());
        let x_im = tape.constant(spec.im_tensor());

        // compression: one shared matrix for both planes
        let w_full = tape.concat(&[binds[self.scm_low], binds[self.scm_high]], 0)?;
        let comp_re = tape.matmul_nt(x_re, w_full)?;
        let comp_im = tape.matmul_nt(x_im, w_full)?;

        // stack planes as channels: [2, compressed, frames]
        let fc_bins = self.config.compressed;
        let re3 = tape.reshape(comp_re, vec![1, frames, fc_bins])?;
        let re3 = tape.permute3(re3, [0, 2, 1])?;
        let im3 = tape.reshape(comp_im, vec![1, frames, fc_bins])?;
        let im3 = tape.permute3(im3, [0, 2, 1])?;
        let mut x = tape.concat(&[re3, im3], 0)?;

        // encoder with retained skip outputs
        let mut skips = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            x = self.conv_stage(tape, binds, layer, x, training, false, &mut bn_nodes)?;
            skips.push(x);
        }

        // dual path in [frames, f_prime, channels] layout
        let u = tape.permute3(x, [2, 1, 0])?;
        let dp = self.dual_path(tape, binds, u)?;
        let dp_cft = tape.permute3(dp, [2, 1, 0])?;

        let re = self.decode(
            tape,
            binds,
            &self.decoder_re,
            dp_cft,
            &skips,
            frames,
            training,
            &mut bn_nodes,
        )?;
        let im = self.decode(
            tape,
            binds,
            &self.decoder_im,
            dp_cft,
            &skips,
            frames,
            training,
            &mut bn_nodes,
        )?;
        Ok(ForwardOutput { re, im, bn_nodes })
    }

    /// Run inference on a spectrogram and return the estimated spectrogram.
    pub fn enhance_spectrogram(
        &self,
        spec: &ComplexSpectrogram<T>,
    ) -> Result<ComplexSpectrogram<T>> {
        let mut tape = Tape::new();
        let binds = self.bind(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, &binds, spec, false)?;
        Ok(ComplexSpectrogram {
            frames: spec.frames,
            bins: self.config.f_bins,
            re: tape.value(out.re).data().to_vec(),
            im: tape.value(out.im).data().to_vec(),
        })
    }

    /// Fold training-mode batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, tape: &Tape<T>, bn_nodes: &[(ParamId, ParamId, Var)]) {
        let momentum = T::from_f64(BN_MOMENTUM);
        let one_minus = T::from_f64(1.0 - BN_MOMENTUM);
        for &(mean_id, var_id, node) in bn_nodes {
            let (batch_mean, batch_var) = match tape.batch_stats(node) {
                Some(stats) => stats,
                None => continue,
            };
            let new_mean: Vec<T> = self
                .params
                .get(mean_id)
                .value
                .data()
                .iter()
                .zip(batch_mean.iter())
                .map(|(&old, &b)| old * momentum + b * one_minus)
                .collect();
            let new_var: Vec<T> = self
                .params
                .get(var_id)
                .value
                .data()
                .iter()
                .zip(batch_var.iter())
                .map(|(&old, &b)| old * momentum + b * one_minus)
                .collect();
            let mean_shape = self.params.get(mean_id).value.shape().to_vec();
            let var_shape = self.params.get(var_id).value.shape().to_vec();
            self.params.set_value(
                mean_id,
                Tensor::from_vec(mean_shape, new_mean).expect("bn mean"),
            );
            self.params.set_value(
                var_id,
                Tensor::from_vec(var_shape, new_var).expect("bn var"),
            );
        }
    }

    /// Per-layer summary: (name, shape, trainable, element count).
    pub fn summary(&self) -> Vec<(String, Vec<usize>, bool, usize)> {
        self.params
            .iter()
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    p.value.shape().to_vec(),
                    p.trainable,
                    p.value.numel(),
                )
            })
            .collect()
    }

    /// The ParamId of the frozen identity block (for freeze-contract tests).
    pub fn scm_low_id(&self) -> ParamId {
        self.scm_low
    }

    /// The ParamId of the trainable high-band compression block.
    pub fn scm_high_id(&self) -> ParamId {
        self.scm_high
    }
}
