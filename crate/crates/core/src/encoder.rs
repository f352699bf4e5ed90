//! FastViT-family hybrid encoder.
//!
//! The encoder is a convolutional stem followed by four stages at strides
//! 4/8/16/32 with widths `[Z, 2Z, 4Z, 8Z]`. Early stages mix tokens with
//! RepMixer blocks; the SA/MA variants replace the last stage with
//! self-attention blocks preceded by a conditional positional encoding.
//!
//! Every multi-branch block exists in two forms. The branch form is what is
//! trained; [`Encoder::reparameterize`] folds each block's normalization and
//! parallel branches into one convolution with bias. Outputs of the two forms
//! agree up to floating-point rounding when the branch form is evaluated with
//! its running statistics.

use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    channel_view, param, BatchNorm2d, Builder, Conv2d, Init, LayerNorm, Linear, ParamKind, ParamStore,
};
use crate::profiler::{Profile, Tally};

type Shape = (usize, usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderVariant {
    T8,
    T12,
    S12,
    SA12,
    SA24,
    SA36,
    MA36,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 7] = [
        EncoderVariant::T8,
        EncoderVariant::T12,
        EncoderVariant::S12,
        EncoderVariant::SA12,
        EncoderVariant::SA24,
        EncoderVariant::SA36,
        EncoderVariant::MA36,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EncoderVariant::T8 => "T8",
            EncoderVariant::T12 => "T12",
            EncoderVariant::S12 => "S12",
            EncoderVariant::SA12 => "SA12",
            EncoderVariant::SA24 => "SA24",
            EncoderVariant::SA36 => "SA36",
            EncoderVariant::MA36 => "MA36",
        }
    }

    /// Channel count of the last stage.
    pub fn final_width(self) -> usize {
        match self {
            EncoderVariant::T8 => 384,
            EncoderVariant::MA36 => 608,
            _ => 512,
        }
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase();
        let key = key.strip_prefix("FASTVIT-").unwrap_or(&key);
        EncoderVariant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown encoder variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    RepMixer,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Width of the first stage; stage widths are `[Z, 2Z, 4Z, 8Z]`.
    pub base_width: usize,
    pub stage_depths: [usize; 4],
    pub stage_kinds: [StageKind; 4],
    pub mlp_ratio: usize,
    pub layer_scale_init: f32,
    /// `true` for the multi-branch (trainable) form, `false` once fused.
    pub train_mode: bool,
}

impl EncoderConfig {
    pub fn new(variant: EncoderVariant) -> Self {
        use StageKind::{Attention as A, RepMixer as R};
        let (depths, kinds, mlp, ls) = match variant {
            EncoderVariant::T8 => ([2, 2, 4, 2], [R, R, R, R], 3, 1e-5),
            EncoderVariant::T12 => ([2, 2, 6, 2], [R, R, R, R], 3, 1e-5),
            EncoderVariant::S12 => ([2, 2, 6, 2], [R, R, R, R], 4, 1e-5),
            EncoderVariant::SA12 => ([2, 2, 6, 2], [R, R, R, A], 4, 1e-5),
            EncoderVariant::SA24 => ([4, 4, 12, 4], [R, R, R, A], 4, 1e-5),
            EncoderVariant::SA36 => ([6, 6, 18, 6], [R, R, R, A], 4, 1e-6),
            EncoderVariant::MA36 => ([6, 6, 18, 6], [R, R, R, A], 4, 1e-6),
        };
        Self {
            variant,
            base_width: variant.final_width() / 8,
            stage_depths: depths,
            stage_kinds: kinds,
            mlp_ratio: mlp,
            layer_scale_init: ls,
            train_mode: true,
        }
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        let z = self.base_width;
        [z, 2 * z, 4 * z, 8 * z]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width * 8 != self.variant.final_width() {
            return Err(Error::Config(format!(
                "base width {} inconsistent with {} (final stage width {})",
                self.base_width,
                self.variant,
                self.variant.final_width()
            )));
        }
        if !self.base_width.is_multiple_of(ATTENTION_HEAD_DIM) && self.stage_kinds.contains(&StageKind::Attention) {
            // widths 4Z and 8Z must split into whole heads
            if !(8 * self.base_width).is_multiple_of(ATTENTION_HEAD_DIM) {
                return Err(Error::Config("attention width not divisible by head size".into()));
            }
        }
        let first_attention = self.stage_kinds.iter().position(|k| *k == StageKind::Attention);
        if let Some(i) = first_attention {
            if self.stage_kinds[i..].iter().any(|k| *k != StageKind::Attention) {
                return Err(Error::Config("attention stages must be the trailing stages".into()));
            }
        }
        if self.stage_depths.contains(&0) || self.mlp_ratio == 0 {
            return Err(Error::Config("stage depths and mlp ratio must be positive".into()));
        }
        Ok(())
    }
}

const ATTENTION_HEAD_DIM: usize = 32;
const CPE_KERNEL: usize = 7;
const PATCH_KERNEL: usize = 7;
const MIXER_KERNEL: usize = 3;
const FFN_KERNEL: usize = 7;

fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

fn copy_var(b: &Builder, name: &str, v: &candle_core::Var, kind: ParamKind) -> Result<candle_core::Var> {
    b.adopt(name, &v.as_tensor().copy()?, kind)
}

fn ensure_calibrated(bn: &BatchNorm2d, what: &str) -> Result<()> {
    if bn.is_calibrated()? {
        Ok(())
    } else {
        Err(Error::NotCalibrated(format!(
            "normalization statistics of {what} are unpopulated; run a calibration forward pass \
             in training mode (or load a checkpoint) before reparameterizing"
        )))
    }
}

/// Convolution followed by batch normalization, no bias.
#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(b: &Builder, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&b.pp("conv"), cin, cout, k, stride, pad, groups, false)?,
            bn: BatchNorm2d::new(&b.pp("bn"), cout)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward_t(&self.conv.forward_t(x, train)?, train)
    }

    /// Equivalent `(weight, bias)` of evaluation-mode conv+bn, with the
    /// kernel zero-padded to `k x k`.
    fn fold(&self, k: usize) -> Result<(Tensor, Tensor)> {
        ensure_calibrated(&self.bn, "a conv branch")?;
        let (scale, shift) = self.bn.fold()?;
        let w = self.conv.weight.as_tensor().detach().broadcast_mul(&scale.reshape(((), 1, 1, 1))?)?;
        let kk = self.conv.kernel;
        let pad = (k - kk) / 2;
        let w = if pad > 0 { w.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)? } else { w };
        Ok((w, shift))
    }

    fn profile(&self, shape: Shape, tally: &mut Tally) -> Shape {
        let out = self.conv.profile(shape, tally);
        self.bn.profile(out, tally)
    }
}

/// Identity kernel `[out, in/groups, k, k]` for a block with `in == out`.
fn identity_kernel(channels: usize, groups: usize, k: usize) -> Result<Tensor> {
    let per_group = channels / groups;
    let mut data = vec![0f32; channels * per_group * k * k];
    for o in 0..channels {
        let i = o % per_group;
        data[((o * per_group + i) * k + k / 2) * k + k / 2] = 1.0;
    }
    Ok(Tensor::from_vec(data, (channels, per_group, k, k), &candle_core::Device::Cpu)?)
}

#[derive(Clone, Debug)]
enum BranchForm {
    Branches { conv: Option<ConvBn>, scale: Option<ConvBn>, skip: Option<BatchNorm2d> },
    Fused(Conv2d),
}

/// MobileOne-style block: `k x k` conv-bn, `1 x 1` conv-bn and a
/// normalization-only identity branch, summed.
#[derive(Clone, Debug)]
pub struct MobileOneBlock {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
    activation: bool,
    form: BranchForm,
}

impl MobileOneBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        b: &Builder,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        activation: bool,
        branches: (bool, bool, bool),
    ) -> Result<Self> {
        let (use_conv, use_scale, use_skip) = branches;
        let pad = k / 2;
        let conv = if use_conv { Some(ConvBn::new(&b.pp("conv_kxk"), cin, cout, k, stride, pad, groups)?) } else { None };
        let scale = if use_scale && k > 1 {
            Some(ConvBn::new(&b.pp("conv_scale"), cin, cout, 1, stride, 0, groups)?)
        } else {
            None
        };
        let skip = if use_skip && cin == cout && stride == 1 { Some(BatchNorm2d::new(&b.pp("identity"), cin)?) } else { None };
        Ok(Self {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            groups,
            activation,
            form: BranchForm::Branches { conv, scale, skip },
        })
    }

    fn standard(b: &Builder, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> Result<Self> {
        Self::new(b, cin, cout, k, stride, groups, true, (true, true, true))
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = match &self.form {
            BranchForm::Fused(c) => c.forward_t(x, train)?,
            BranchForm::Branches { conv, scale, skip } => {
                let mut acc: Option<Tensor> = None;
                let mut add = |t: Tensor| -> Result<()> {
                    acc = Some(match acc.take() {
                        Some(a) => (a + t)?,
                        None => t,
                    });
                    Ok(())
                };
                if let Some(s) = skip {
                    add(s.forward_t(x, train)?)?;
                }
                if let Some(s) = scale {
                    add(s.forward_t(x, train)?)?;
                }
                if let Some(c) = conv {
                    add(c.forward_t(x, train)?)?;
                }
                acc.ok_or_else(|| Error::Config("block without branches".into()))?
            }
        };
        if self.activation {
            gelu(&y)
        } else {
            Ok(y)
        }
    }

    /// Single `(weight, bias)` equivalent to the evaluation-mode branches.
    fn fused_kernel(&self) -> Result<(Tensor, Tensor)> {
        let k = self.kernel;
        match &self.form {
            BranchForm::Fused(c) => {
                let bias = match &c.bias {
                    Some(b) => b.as_tensor().detach(),
                    None => Tensor::zeros(self.out_channels, candle_core::DType::F32, &candle_core::Device::Cpu)?,
                };
                Ok((c.weight.as_tensor().detach(), bias))
            }
            BranchForm::Branches { conv, scale, skip } => {
                let mut w = Tensor::zeros(
                    (self.out_channels, self.in_channels / self.groups, k, k),
                    candle_core::DType::F32,
                    &candle_core::Device::Cpu,
                )?;
                let mut bias = Tensor::zeros(self.out_channels, candle_core::DType::F32, &candle_core::Device::Cpu)?;
                for branch in [conv, scale].into_iter().flatten() {
                    let (bw, bb) = branch.fold(k)?;
                    w = (w + bw)?;
                    bias = (bias + bb)?;
                }
                if let Some(bn) = skip {
                    ensure_calibrated(bn, "an identity branch")?;
                    let (s, sh) = bn.fold()?;
                    let id = identity_kernel(self.in_channels, self.groups, k)?;
                    w = (w + id.broadcast_mul(&s.reshape(((), 1, 1, 1))?)?)?;
                    bias = (bias + sh)?;
                }
                Ok((w, bias))
            }
        }
    }

    fn reparameterize(&self, b: &Builder) -> Result<Self> {
        let (w, bias) = self.fused_kernel()?;
        let conv = Conv2d::from_tensors(&b.pp("reparam_conv"), &w, Some(&bias), self.stride, self.kernel / 2, self.groups)?;
        Ok(Self { form: BranchForm::Fused(conv), ..self.clone() })
    }

    fn profile(&self, shape: Shape, tally: &mut Tally) -> Shape {
        let out = match &self.form {
            BranchForm::Fused(conv) => conv.profile(shape, tally),
            BranchForm::Branches { conv, scale, skip } => {
                let mut out = shape;
                for br in [conv, scale].into_iter().flatten() {
                    out = br.profile(shape, tally);
                }
                if let Some(bn) = skip {
                    bn.profile(shape, tally);
                }
                tally.activation(out);
                out
            }
        };
        if self.activation {
            tally.activation(out);
        }
        out
    }
}

/// Large-kernel depthwise conv with a parallel small-kernel branch.
#[derive(Clone, Debug)]
struct LargeKernelConv {
    kernel: usize,
    stride: usize,
    groups: usize,
    form: LargeKernelForm,
}

#[derive(Clone, Debug)]
enum LargeKernelForm {
    Branches { large: ConvBn, small: ConvBn },
    Fused(Conv2d),
}

impl LargeKernelConv {
    fn new(b: &Builder, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            kernel: k,
            stride,
            groups,
            form: LargeKernelForm::Branches {
                large: ConvBn::new(&b.pp("large_conv"), cin, cout, k, stride, k / 2, groups)?,
                small: ConvBn::new(&b.pp("small_conv"), cin, cout, 3, stride, 1, groups)?,
            },
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = match &self.form {
            LargeKernelForm::Branches { large, small } => (large.forward_t(x, train)? + small.forward_t(x, train)?)?,
            LargeKernelForm::Fused(c) => c.forward_t(x, train)?,
        };
        gelu(&y)
    }

    fn reparameterize(&self, b: &Builder) -> Result<Self> {
        let conv = match &self.form {
            LargeKernelForm::Fused(c) => c.copy_to(&b.pp("reparam_conv"))?,
            LargeKernelForm::Branches { large, small } => {
                let (wl, bl) = large.fold(self.kernel)?;
                let (ws, bs) = small.fold(self.kernel)?;
                Conv2d::from_tensors(&b.pp("reparam_conv"), &(wl + ws)?, Some(&(bl + bs)?), self.stride, self.kernel / 2, self.groups)?
            }
        };
        Ok(Self { form: LargeKernelForm::Fused(conv), ..self.clone() })
    }

    fn profile(&self, shape: Shape, tally: &mut Tally) -> Shape {
        let out = match &self.form {
            LargeKernelForm::Branches { large, small } => {
                let o = large.profile(shape, tally);
                small.profile(shape, tally);
                tally.activation(o);
                o
            }
            LargeKernelForm::Fused(c) => c.profile(shape, tally),
        };
        tally.activation(out);
        out
    }
}

/// Strided downsampling between stages.
#[derive(Clone, Debug)]
struct PatchEmbed {
    spatial: LargeKernelConv,
    pointwise: MobileOneBlock,
}

impl PatchEmbed {
    fn new(b: &Builder, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            spatial: LargeKernelConv::new(&b.pp("proj.0"), cin, cout, PATCH_KERNEL, 2, cin)?,
            pointwise: MobileOneBlock::standard(&b.pp("proj.1"), cout, cout, 1, 1, 1)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.pointwise.forward_t(&self.spatial.forward_t(x, train)?, train)
    }

    fn reparameterize(&self, b: &Builder) -> Result<Self> {
        Ok(Self {
            spatial: self.spatial.reparameterize(&b.pp("proj.0"))?,
            pointwise: self.pointwise.reparameterize(&b.pp("proj.1"))?,
        })
    }
}

/// RepMixer token mixer: `x + s * (mixer(x) - norm(x))`.
#[derive(Clone, Debug)]
enum RepMixer {
    Branches { norm: MobileOneBlock, mixer: MobileOneBlock, layer_scale: candle_core::Var },
    Fused(Conv2d),
}

impl RepMixer {
    fn new(b: &Builder, dim: usize, ls: f32) -> Result<Self> {
        Ok(RepMixer::Branches {
            norm: MobileOneBlock::new(&b.pp("norm"), dim, dim, MIXER_KERNEL, 1, dim, false, (false, false, true))?,
            mixer: MobileOneBlock::new(&b.pp("mixer"), dim, dim, MIXER_KERNEL, 1, dim, false, (true, true, true))?,
            layer_scale: b.create("layer_scale", &[dim], Init::Const(ls), ParamKind::Trainable)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            RepMixer::Fused(c) => c.forward_t(x, train),
            RepMixer::Branches { norm, mixer, layer_scale } => {
                let delta = (mixer.forward_t(x, train)? - norm.forward_t(x, train)?)?;
                Ok((x + delta.broadcast_mul(&channel_view(&param(layer_scale, train))?)?)?)
            }
        }
    }

    fn reparameterize(&self, b: &Builder) -> Result<Self> {
        match self {
            RepMixer::Fused(c) => Ok(RepMixer::Fused(c.copy_to(&b.pp("reparam_conv"))?)),
            RepMixer::Branches { norm, mixer, layer_scale } => {
                let dim = layer_scale.elem_count();
                let (wm, bm) = mixer.fused_kernel()?;
                let (wn, bnorm) = norm.fused_kernel()?;
                let s = layer_scale.as_tensor().detach();
                let id = identity_kernel(dim, dim, MIXER_KERNEL)?;
                let w = (id + (wm - wn)?.broadcast_mul(&s.reshape(((), 1, 1, 1))?)?)?;
                let bias = ((bm - bnorm)? * &s)?;
                Ok(RepMixer::Fused(Conv2d::from_tensors(&b.pp("reparam_conv"), &w, Some(&bias), 1, MIXER_KERNEL / 2, dim)?))
            }
        }
    }

    fn profile(&self, shape: Shape, tally: &mut Tally) -> Shape {
        match self {
            RepMixer::Fused(c) => c.profile(shape, tally),
            RepMixer::Branches { norm, mixer, .. } => {
                norm.profile(shape, tally);
                let o = mixer.profile(shape, tally);
                tally.activation(o);
                o
            }
        }
    }
}

/// Depthwise 7x7 conv-bn followed by a pointwise MLP.
#[derive(Clone, Debug)]
struct ConvFfn {
    conv: ConvBn,
    fc1: Conv2d,
    fc2: Conv2d,
}

impl ConvFfn {
    fn new(b: &Builder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            conv: ConvBn::new(&b.pp("conv"), dim, dim, FFN_KERNEL, 1, FFN_KERNEL / 2, dim)?,
            fc1: Conv2d::new(&b.pp("fc1"), dim, hidden, 1, 1, 0, 1, true)?,
            fc2: Conv2d::new(&b.pp("fc2"), hidden, dim, 1, 1, 0, 1, true)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv.forward_t(x, train)?;
        let y = gelu(&self.fc1.forward_t(&y, train)?)?;
        self.fc2.forward_t(&y, train)
    }

    fn copy(&self, b: &Builder) -> Result<Self> {
        Ok(Self {
            conv: ConvBn { conv: self.conv.conv.copy_to(&b.pp("conv.conv"))?, bn: self.conv.bn.copy_to(&b.pp("conv.bn"))? },
            fc1: self.fc1.copy_to(&b.pp("fc1"))?,
            fc2: self.fc2.copy_to(&b.pp("fc2"))?,
        })
    }

    fn profile(&self, shape: Shape, tally: &mut Tally) -> Shape {
        let s = self.conv.profile(shape, tally);
        let s = self.fc1.profile(s, tally);
        tally.activation(s);
        self.fc2.profile(s, tally)
    }
}

#[derive(Clone, Debug)]
struct RepMixerBlock {
    mixer: RepMixer,
    ffn: ConvFfn,
    layer_scale: candle_core::Var,
}

impl RepMixerBlock {
    fn new(b: &Builder, dim: usize, mlp_ratio: usize, ls: f32) -> Result<Self> {
        Ok(Self {
            mixer: RepMixer::new(&b.pp("token_mixer"), dim, ls)?,
            ffn: ConvFfn::new(&b.pp("convffn"), dim, dim * mlp_ratio)?,
            layer_scale: b.create("layer_scale", &[dim], Init::Const(ls), ParamKind::Trainable)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.mixer.forward_t(x, train)?;
        let f = self.ffn.forward_t(&x, train)?;
        Ok((&x + f.broadcast_mul(&channel_view(&param(&self.layer_scale, train))?)?)?)
    }

    fn reparameterize(&self, b: &Builder) -> Result<Self> {
        Ok(Self {
            mixer: self.mixer.reparameterize(&b.pp("token_mixer"))?,
            ffn: self.ffn.copy(&b.pp("convffn"))?,
            layer_scale: copy_var(b, "layer_scale", &self.layer_scale, ParamKind::Trainable)?,
        })
    }

    fn profile(&self, shape: Shape, tally: &mut Tally) -> Shape {
        let s = self.mixer.profile(shape, tally);
        let s = self.ffn.profile(s, tally);
        tally.activation(s);
        s
    }
}

/// Multi-head self-attention over the spatial tokens of a feature map.
#[derive(Clone, Debug)]
struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    fn new(b: &Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(&b.pp("qkv"), dim, 3 * dim, false)?,
            proj: Linear::new(&b.pp("proj"), dim, dim, true)?,
            heads: dim / ATTENTION_HEAD_DIM,
        })
    }

    /// `tokens: [B, N, C]`
    fn forward_t(&self, tokens: &Tensor, train: bool) -> Result<Tensor> {
        let (b, n, c) = tokens.dims3()?;
        let hd = c / self.heads;
        let qkv = self.qkv.forward_t(tokens, train)?.reshape((b, n, 3, self.heads, hd))?.permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * (hd as f64).powf(-0.5))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let attn = softmax_last(&q.matmul(&k.t()?)?)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.proj.forward_t(&y, train)
    }

    fn copy(&self, b: &Builder) -> Result<Self> {
        Ok(Self { qkv: self.qkv.copy_to(&b.pp("qkv"))?, proj: self.proj.copy_to(&b.pp("proj"))?, heads: self.heads })
    }
}

/// Row-wise softmax over the last dimension (max-subtracted).
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    norm: LayerNorm,
    attention: Attention,
    ffn: ConvFfn,
    layer_scale_1: candle_core::Var,
    layer_scale_2: candle_core::Var,
}

impl AttentionBlock {
    fn new(b: &Builder, dim: usize, mlp_ratio: usize, ls: f32) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&b.pp("norm"), dim)?,
            attention: Attention::new(&b.pp("token_mixer"), dim)?,
            ffn: ConvFfn::new(&b.pp("convffn"), dim, dim * mlp_ratio)?,
            layer_scale_1: b.create("layer_scale_1", &[dim], Init::Const(ls), ParamKind::Trainable)?,
            layer_scale_2: b.create("layer_scale_2", &[dim], Init::Const(ls), ParamKind::Trainable)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = x.flatten_from(2)?.transpose(1, 2)?;
        let mixed = self.attention.forward_t(&self.norm.forward_t(&tokens, train)?, train)?;
        let mixed = mixed.transpose(1, 2)?.reshape((b, c, h, w))?;
        let x = (x + mixed.broadcast_mul(&channel_view(&param(&self.layer_scale_1, train))?)?)?;
        let f = self.ffn.forward_t(&x, train)?;
        Ok((&x + f.broadcast_mul(&channel_view(&param(&self.layer_scale_2, train))?)?)?)
    }

    fn copy(&self, b: &Builder) -> Result<Self> {
        Ok(Self {
            norm: self.norm.copy_to(&b.pp("norm"))?,
            attention: self.attention.copy(&b.pp("token_mixer"))?,
            ffn: self.ffn.copy(&b.pp("convffn"))?,
            layer_scale_1: copy_var(b, "layer_scale_1", &self.layer_scale_1, ParamKind::Trainable)?,
            layer_scale_2: copy_var(b, "layer_scale_2", &self.layer_scale_2, ParamKind::Trainable)?,
        })
    }

    fn profile(&self, (c, h, w): Shape, tally: &mut Tally) -> Shape {
        let n = h * w;
        let heads = self.attention.heads as u64;
        let (n64, c64) = (n as u64, c as u64);
        tally.norm(2 * c, (c, h, w));
        tally.linear(c, 3 * c, false, n);
        // scores q·kᵀ, softmax, then weighted values
        tally.matmul(n64 * n64 * c64, heads * n64 * n64);
        tally.activation((self.attention.heads, n, n));
        tally.matmul(n64 * n64 * c64, n64 * c64);
        tally.linear(c, c, true, n);
        tally.activation((c, h, w));
        let s = self.ffn.profile((c, h, w), tally);
        tally.activation(s);
        s
    }
}

/// Conditional positional encoding: `x + dwconv7x7(x)`.
#[derive(Clone, Debug)]
enum RepCpe {
    Branches(Conv2d),
    Fused(Conv2d),
}

impl RepCpe {
    fn new(b: &Builder, dim: usize) -> Result<Self> {
        Ok(RepCpe::Branches(Conv2d::new(&b.pp("pe"), dim, dim, CPE_KERNEL, 1, CPE_KERNEL / 2, dim, true)?))
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            RepCpe::Branches(c) => Ok((c.forward_t(x, train)? + x)?),
            RepCpe::Fused(c) => c.forward_t(x, train),
        }
    }

    fn reparameterize(&self, b: &Builder) -> Result<Self> {
        match self {
            RepCpe::Fused(c) => Ok(RepCpe::Fused(c.copy_to(&b.pp("reparam_conv"))?)),
            RepCpe::Branches(c) => {
                let dim = c.out_channels;
                let w = (c.weight.as_tensor().detach() + identity_kernel(dim, dim, CPE_KERNEL)?)?;
                let bias = c.bias.as_ref().expect("pe conv has bias").as_tensor().detach();
                Ok(RepCpe::Fused(Conv2d::from_tensors(&b.pp("reparam_conv"), &w, Some(&bias), 1, CPE_KERNEL / 2, dim)?))
            }
        }
    }

    fn profile(&self, shape: Shape, tally: &mut Tally) -> Shape {
        match self {
            RepCpe::Branches(c) => {
                let o = c.profile(shape, tally);
                tally.activation(o);
                o
            }
            RepCpe::Fused(c) => c.profile(shape, tally),
        }
    }
}

#[derive(Clone, Debug)]
enum Block {
    RepMixer(RepMixerBlock),
    Attention(AttentionBlock),
}

#[derive(Clone, Debug)]
struct Stage {
    downsample: Option<PatchEmbed>,
    pos_emb: Option<RepCpe>,
    blocks: Vec<Block>,
}

/// Stage outputs consumed by the decoder. All tensors carry a batch axis.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// Convolutional stem output, `[B, Z, H/4, W/4]`.
    pub stem: Tensor,
    pub s1: Tensor,
    pub s2: Tensor,
    pub s3: Tensor,
    pub s4: Tensor,
    /// Global average of `s4`, `[B, 8Z]`.
    pub pooled: Tensor,
}

impl FeaturePyramid {
    pub fn stages(&self) -> [&Tensor; 4] {
        [&self.s1, &self.s2, &self.s3, &self.s4]
    }
}

/// Checks that both spatial dimensions are multiples of 32.
pub fn check_input_dims(h: usize, w: usize) -> Result<()> {
    for (name, v) in [("height", h), ("width", w)] {
        if v == 0 || v % 32 != 0 {
            return Err(Error::Shape(format!("input {name} {v} is not a positive multiple of 32")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stem: [MobileOneBlock; 3],
    stages: Vec<Stage>,
}

impl Encoder {
    /// Builds an encoder whose parameters are registered under `b`.
    pub fn new(b: &Builder, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        if !config.train_mode {
            return Err(Error::Config(
                "encoders are built in branch form; call reparameterize() for the fused form".into(),
            ));
        }
        let widths = config.stage_widths();
        let z = widths[0];
        let sb = b.pp("stem");
        let stem = [
            MobileOneBlock::standard(&sb.pp(0), 3, z, 3, 2, 1)?,
            MobileOneBlock::standard(&sb.pp(1), z, z, 3, 2, z)?,
            MobileOneBlock::standard(&sb.pp(2), z, z, 1, 1, 1)?,
        ];
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let stb = b.pp(format!("stages.{i}"));
            let dim = widths[i];
            let downsample = if i > 0 { Some(PatchEmbed::new(&stb.pp("downsample"), widths[i - 1], dim)?) } else { None };
            let attention = config.stage_kinds[i] == StageKind::Attention;
            let pos_emb = if attention { Some(RepCpe::new(&stb.pp("pos_emb"), dim)?) } else { None };
            let blocks = (0..config.stage_depths[i])
                .map(|j| {
                    let bb = stb.pp(format!("blocks.{j}"));
                    Ok(if attention {
                        Block::Attention(AttentionBlock::new(&bb, dim, config.mlp_ratio, config.layer_scale_init)?)
                    } else {
                        Block::RepMixer(RepMixerBlock::new(&bb, dim, config.mlp_ratio, config.layer_scale_init)?)
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, pos_emb, blocks });
        }
        Ok(Self { config: config.clone(), stem, stages })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn is_reparameterized(&self) -> bool {
        !self.config.train_mode
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        check_input_dims(h, w)?;
        let mut y = x.clone();
        for block in &self.stem {
            y = block.forward_t(&y, train)?;
        }
        let stem = y.clone();
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(d) = &stage.downsample {
                y = d.forward_t(&y, train)?;
            }
            if let Some(p) = &stage.pos_emb {
                y = p.forward_t(&y, train)?;
            }
            for block in &stage.blocks {
                y = match block {
                    Block::RepMixer(b) => b.forward_t(&y, train)?,
                    Block::Attention(b) => b.forward_t(&y, train)?,
                };
            }
            outs.push(y.clone());
        }
        let pooled = outs[3].mean(D::Minus1)?.mean(D::Minus1)?;
        let mut it = outs.into_iter();
        Ok(FeaturePyramid {
            stem,
            s1: it.next().unwrap(),
            s2: it.next().unwrap(),
            s3: it.next().unwrap(),
            s4: it.next().unwrap(),
            pooled,
        })
    }

    /// Fused inference-form copy registered under `b`. Calling this on an
    /// already fused encoder returns a parameter-identical copy.
    pub fn reparameterize(&self, b: &Builder) -> Result<Encoder> {
        let sb = b.pp("stem");
        let stem = [
            self.stem[0].reparameterize(&sb.pp(0))?,
            self.stem[1].reparameterize(&sb.pp(1))?,
            self.stem[2].reparameterize(&sb.pp(2))?,
        ];
        let mut stages = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            let stb = b.pp(format!("stages.{i}"));
            let downsample = stage.downsample.as_ref().map(|d| d.reparameterize(&stb.pp("downsample"))).transpose()?;
            let pos_emb = stage.pos_emb.as_ref().map(|p| p.reparameterize(&stb.pp("pos_emb"))).transpose()?;
            let blocks = stage
                .blocks
                .iter()
                .enumerate()
                .map(|(j, block)| {
                    let bb = stb.pp(format!("blocks.{j}"));
                    Ok(match block {
                        Block::RepMixer(r) => Block::RepMixer(r.reparameterize(&bb)?),
                        Block::Attention(a) => Block::Attention(a.copy(&bb)?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, pos_emb, blocks });
        }
        let mut config = self.config.clone();
        config.train_mode = false;
        Ok(Encoder { config, stem, stages })
    }
}

impl Profile for Encoder {
    fn profile(&self, shape: Shape, tally: &mut Tally) -> Shape {
        let mut s = shape;
        for b in &self.stem {
            s = b.profile(s, tally);
        }
        for stage in &self.stages {
            if let Some(d) = &stage.downsample {
                s = d.spatial.profile(s, tally);
                s = d.pointwise.profile(s, tally);
            }
            if let Some(p) = &stage.pos_emb {
                s = p.profile(s, tally);
            }
            for block in &stage.blocks {
                s = match block {
                    Block::RepMixer(b) => b.profile(s, tally),
                    Block::Attention(b) => b.profile(s, tally),
                };
            }
        }
        s
    }
}

/// Builds a standalone encoder in its own store.
pub fn build_encoder(config: &EncoderConfig, seed: u64) -> Result<(Encoder, ParamStore)> {
    let store = ParamStore::new();
    let encoder = Encoder::new(&Builder::new(&store, seed).pp("encoder"), config)?;
    Ok((encoder, store))
}

/// Standalone fused copy of `encoder` in a fresh store.
pub fn reparameterize(encoder: &Encoder) -> Result<(Encoder, ParamStore)> {
    let store = ParamStore::new();
    let fused = encoder.reparameterize(&Builder::new(&store, 0).pp("encoder"))?;
    Ok((fused, store))
}

/// Dense layer on the pooled final-stage features producing tissue scores.
#[derive(Clone, Debug)]
pub struct TissueClassifier {
    pub linear: Linear,
}

impl TissueClassifier {
    pub fn new(b: &Builder, in_features: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("tissue classifier needs at least 2 classes, got {num_classes}")));
        }
        Ok(Self { linear: Linear::new(b, in_features, num_classes, true)? })
    }

    pub fn num_classes(&self) -> usize {
        self.linear.out_features()
    }

    /// `[B, num_classes]` unnormalized scores.
    pub fn tissue_logits(&self, pyramid: &FeaturePyramid, train: bool) -> Result<Tensor> {
        self.linear.forward_t(&pyramid.pooled, train)
    }

    pub fn copy_to(&self, b: &Builder) -> Result<Self> {
        Ok(Self { linear: self.linear.copy_to(b)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn input(seed: u64, b: usize, hw: usize) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..b * 3 * hw * hw).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (b, 3, hw, hw), &Device::Cpu).unwrap()
    }

    #[test]
    fn variant_widths() {
        assert_eq!(EncoderConfig::new(EncoderVariant::T8).stage_widths(), [48, 96, 192, 384]);
        assert_eq!(EncoderConfig::new(EncoderVariant::S12).base_width, 64);
        assert_eq!(EncoderConfig::new(EncoderVariant::MA36).base_width, 76);
        for v in EncoderVariant::ALL {
            let c = EncoderConfig::new(v);
            c.validate().unwrap();
            assert_eq!(c.stage_widths()[3], v.final_width());
        }
        assert!("XL99".parse::<EncoderVariant>().is_err());
        assert_eq!("fastvit-sa24".parse::<EncoderVariant>().unwrap(), EncoderVariant::SA24);
    }

    #[test]
    fn inconsistent_width_rejected() {
        let mut c = EncoderConfig::new(EncoderVariant::S12);
        c.base_width = 48;
        assert!(build_encoder(&c, 0).is_err());
    }

    #[test]
    fn t8_shapes() {
        let (enc, _) = build_encoder(&EncoderConfig::new(EncoderVariant::T8), 0).unwrap();
        let p = enc.forward_t(&input(0, 1, 64), false).unwrap();
        assert_eq!(p.stem.dims(), &[1, 48, 16, 16]);
        assert_eq!(p.s1.dims(), &[1, 48, 16, 16]);
        assert_eq!(p.s2.dims(), &[1, 96, 8, 8]);
        assert_eq!(p.s3.dims(), &[1, 192, 4, 4]);
        assert_eq!(p.s4.dims(), &[1, 384, 2, 2]);
        assert_eq!(p.pooled.dims(), &[1, 384]);
    }

    #[test]
    fn non_divisible_input_names_dimension() {
        let (enc, _) = build_encoder(&EncoderConfig::new(EncoderVariant::T8), 0).unwrap();
        let x = Tensor::zeros((1, 3, 64, 40), DType::F32, &Device::Cpu).unwrap();
        let err = enc.forward_t(&x, false).unwrap_err().to_string();
        assert!(err.contains("width 40"), "{err}");
    }

    #[test]
    fn uncalibrated_reparameterization_is_an_error() {
        let (enc, _) = build_encoder(&EncoderConfig::new(EncoderVariant::T8), 0).unwrap();
        let err = reparameterize(&enc).unwrap_err();
        assert!(matches!(err, Error::NotCalibrated(_)));
        assert!(err.to_string().contains("calibration forward pass"));
    }

    #[test]
    fn zero_scale_branch_fuses_to_folded_kxk() {
        let store = ParamStore::new();
        let b = Builder::new(&store, 3);
        let block = MobileOneBlock::new(&b, 4, 4, 3, 1, 1, false, (true, true, false)).unwrap();
        let BranchForm::Branches { conv: Some(conv), scale: Some(scale), .. } = &block.form else { panic!() };
        scale.conv.weight.set(&scale.conv.weight.zeros_like().unwrap()).unwrap();
        // populate statistics
        block.forward_t(&input(1, 2, 8).repeat((1, 2, 1, 1)).unwrap().narrow(1, 0, 4).unwrap(), true).unwrap();
        let (fused_w, _) = block.fused_kernel().unwrap();
        let (scale_v, _) = conv.bn.fold().unwrap();
        // scale branch BN may carry a shift but contributes no kernel weight
        let expected = conv.conv.weight.as_tensor().broadcast_mul(&scale_v.reshape(((), 1, 1, 1)).unwrap()).unwrap();
        let d: f32 = (fused_w - expected).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(d < 1e-7);
    }

    #[test]
    fn t8_reparameterization_matches_branch_form() {
        let (enc, store) = build_encoder(&EncoderConfig::new(EncoderVariant::T8), 11).unwrap();
        enc.forward_t(&input(5, 2, 64), true).unwrap();
        let (fused, fused_store) = reparameterize(&enc).unwrap();
        assert!(fused_store.num_trainable() < store.num_trainable());
        let x = input(6, 1, 64);
        let a = enc.forward_t(&x, false).unwrap();
        let b = fused.forward_t(&x, false).unwrap();
        for (u, v) in a.stages().iter().zip(b.stages()) {
            let d: f32 = (*u - v).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            assert!(d < 1e-4, "max deviation {d}");
        }
    }
}
