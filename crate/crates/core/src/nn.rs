//! Parameter storage and the small set of layers the model is built from.
//!
//! Every tensor a model owns lives in a [`ParamStore`] under a hierarchical
//! dotted name. Trainable parameters and buffers (normalization statistics)
//! are kept apart so that the optimizer never touches buffers.
//!
//! Layers take a `train` flag on every forward call. In evaluation mode the
//! parameters are detached so no autograd graph is recorded and
//! intermediate activations are released as soon as they are consumed.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Clone)]
pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
}

/// Shared, name-addressed container of all tensors of one model instance.
#[derive(Clone, Default)]
pub struct ParamStore {
    inner: Arc<Mutex<BTreeMap<String, Param>>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.inner.lock().unwrap().len();
        f.debug_struct("ParamStore").field("entries", &n).finish()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, name: &str, var: Var, kind: ParamKind) -> Result<()> {
        let mut map = self.inner.lock().unwrap();
        if map.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        map.insert(name.to_string(), Param { var, kind });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        self.inner.lock().unwrap().get(name).cloned()
    }

    /// All entries in name order.
    pub fn entries(&self) -> Vec<(String, Param)> {
        self.inner.lock().unwrap().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.entries()
            .into_iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(k, p)| (k, p.var))
            .collect()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Snapshot of every tensor, copied out of the live variables.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.entries()
            .into_iter()
            .map(|(k, p)| Ok((k, p.var.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites every entry from `tensors`. Missing names and shape
    /// mismatches are errors; extra names are ignored.
    pub fn load_tensors(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in self.entries() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != p.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(p.var.dtype())?)?;
        }
        Ok(())
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f32),
    /// Normal truncated at two standard deviations.
    TruncNormal(f32),
    /// Kaiming normal in fan-out mode for a conv weight `[Cout, Cin/g, K, K]`.
    FanOut,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Creates named parameters inside a store. Initial values depend only on
/// the seed and the parameter's full name, never on construction order.
#[derive(Clone, Debug)]
pub struct Builder {
    store: ParamStore,
    path: String,
    seed: u64,
}

impl Builder {
    pub fn new(store: &ParamStore, seed: u64) -> Self {
        Self { store: store.clone(), path: String::new(), seed }
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let path = if self.path.is_empty() { name.to_string() } else { format!("{}.{name}", self.path) };
        Self { store: self.store.clone(), path, seed: self.seed }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    fn full(&self, name: &str) -> String {
        if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.path)
        }
    }

    pub fn create(&self, name: &str, dims: &[usize], init: Init, kind: ParamKind) -> Result<Var> {
        let full = self.full(name);
        let n: usize = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&full));
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::TruncNormal(std) => {
                let dist = Normal::new(0.0f32, std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        let v = dist.sample(&mut rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::FanOut => {
                let fan_out = dims[0] * dims[2..].iter().product::<usize>();
                let dist = Normal::new(0.0f32, (2.0 / fan_out as f32).sqrt()).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        let var = Var::from_vec(data, dims, &Device::Cpu)?;
        self.store.insert(&full, var.clone(), kind)?;
        Ok(var)
    }

    /// Registers an already computed tensor (used when fusing branches).
    pub fn adopt(&self, name: &str, tensor: &Tensor, kind: ParamKind) -> Result<Var> {
        let var = Var::from_tensor(&tensor.detach().to_dtype(DType::F32)?.contiguous()?)?;
        self.store.insert(&self.full(name), var.clone(), kind)?;
        Ok(var)
    }
}

fn copy_var(b: &Builder, name: &str, v: &Var, kind: ParamKind) -> Result<Var> {
    b.adopt(name, &v.as_tensor().copy()?, kind)
}

pub(crate) fn param(var: &Var, train: bool) -> Tensor {
    if train {
        var.as_tensor().clone()
    } else {
        var.as_tensor().detach()
    }
}

/// Per-channel `[C]` vector reshaped for broadcasting over `[B, C, H, W]`.
pub(crate) fn channel_view(t: &Tensor) -> Result<Tensor> {
    Ok(t.reshape((1, t.elem_count(), 1, 1))?)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &Builder,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups != 1 && groups != in_channels {
            return Err(Error::Config(format!(
                "conv groups must be 1 or equal to input channels ({in_channels}), got {groups}"
            )));
        }
        if !out_channels.is_multiple_of(groups) {
            return Err(Error::Config(format!("{out_channels} output channels not divisible by {groups} groups")));
        }
        let weight = b.create(
            "weight",
            &[out_channels, in_channels / groups, kernel, kernel],
            Init::FanOut,
            ParamKind::Trainable,
        )?;
        let bias = if bias { Some(b.create("bias", &[out_channels], Init::Zeros, ParamKind::Trainable)?) } else { None };
        Ok(Self { weight, bias, in_channels, out_channels, kernel, stride, padding, groups })
    }

    /// Conv layer with explicit weights, registered under `b`.
    pub fn from_tensors(
        b: &Builder,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let (out_channels, per_group, kernel, _) = weight.dims4()?;
        let weight_var = b.adopt("weight", weight, ParamKind::Trainable)?;
        let bias = bias.map(|t| b.adopt("bias", t, ParamKind::Trainable)).transpose()?;
        Ok(Self {
            weight: weight_var,
            bias,
            in_channels: per_group * groups,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let w = param(&self.weight, train);
        let y = if self.groups == 1 {
            ops::conv2d(x, &w, self.stride, self.padding)?
        } else {
            ops::depthwise_conv2d(x, &w, self.stride, self.padding)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&channel_view(&param(b, train))?)?),
            None => Ok(y),
        }
    }

    pub fn out_hw(&self, (h, w): (usize, usize)) -> (usize, usize) {
        (
            ops::conv_out_len(h, self.kernel, self.stride, self.padding),
            ops::conv_out_len(w, self.kernel, self.stride, self.padding),
        )
    }

    /// Copy of this layer with its tensors registered under `b`.
    pub fn copy_to(&self, b: &Builder) -> Result<Self> {
        let bias = self.bias.as_ref().map(|v| v.as_tensor().copy()).transpose()?;
        Self::from_tensors(b, &self.weight.as_tensor().copy()?, bias.as_ref(), self.stride, self.padding, self.groups)
    }

    /// Multiply-accumulates for one image of spatial size `hw`.
    pub fn macs(&self, hw: (usize, usize)) -> u64 {
        let (ho, wo) = self.out_hw(hw);
        (self.kernel * self.kernel * (self.in_channels / self.groups) * self.out_channels) as u64
            * (ho * wo) as u64
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: Var,
    pub bias: Var,
    pub running_mean: Var,
    pub running_var: Var,
    /// Number of training-mode forward passes that updated the statistics.
    pub tracked: Var,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(b: &Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: b.create("weight", &[channels], Init::Const(1.0), ParamKind::Trainable)?,
            bias: b.create("bias", &[channels], Init::Zeros, ParamKind::Trainable)?,
            running_mean: b.create("running_mean", &[channels], Init::Zeros, ParamKind::Buffer)?,
            running_var: b.create("running_var", &[channels], Init::Const(1.0), ParamKind::Buffer)?,
            tracked: b.create("num_batches_tracked", &[1], Init::Zeros, ParamKind::Buffer)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn channels(&self) -> usize {
        self.weight.elem_count()
    }

    pub fn is_calibrated(&self) -> Result<bool> {
        Ok(self.tracked.as_tensor().flatten_all()?.get(0)?.to_scalar::<f32>()? > 0.0)
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let gamma = channel_view(&param(&self.weight, train))?;
        let beta = channel_view(&param(&self.bias, train))?;
        if train {
            let (b, c, h, w) = x.dims4()?;
            let n = (b * h * w) as f64;
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let y = centered.broadcast_div(&(&var + self.eps)?.sqrt()?)?;
            {
                let m = self.momentum;
                let mean_d = mean.detach().reshape(c)?;
                let unbiased = (var.detach().reshape(c)? * (n / (n - 1.0).max(1.0)))?;
                let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean_d * m)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                self.tracked.set(&(self.tracked.as_tensor() + 1.0)?)?;
            }
            Ok(y.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
        } else {
            let (scale, shift) = self.fold()?;
            Ok(x.broadcast_mul(&channel_view(&scale)?)?.broadcast_add(&channel_view(&shift)?)?)
        }
    }

    pub fn copy_to(&self, b: &Builder) -> Result<Self> {
        Ok(Self {
            weight: copy_var(b, "weight", &self.weight, ParamKind::Trainable)?,
            bias: copy_var(b, "bias", &self.bias, ParamKind::Trainable)?,
            running_mean: copy_var(b, "running_mean", &self.running_mean, ParamKind::Buffer)?,
            running_var: copy_var(b, "running_var", &self.running_var, ParamKind::Buffer)?,
            tracked: copy_var(b, "num_batches_tracked", &self.tracked, ParamKind::Buffer)?,
            eps: self.eps,
            momentum: self.momentum,
        })
    }

    /// Affine form of evaluation-mode normalization: `y = scale * x + shift`.
    pub fn fold(&self) -> Result<(Tensor, Tensor)> {
        let gamma = self.weight.as_tensor().detach();
        let std = (self.running_var.as_tensor().detach() + self.eps)?.sqrt()?;
        let scale = (gamma / std)?;
        let shift = (self.bias.as_tensor().detach() - (self.running_mean.as_tensor().detach() * &scale)?)?;
        Ok((scale, shift))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(b: &Builder, in_features: usize, out_features: usize, bias: bool) -> Result<Self> {
        let weight = b.create("weight", &[out_features, in_features], Init::TruncNormal(0.02), ParamKind::Trainable)?;
        let bias = if bias { Some(b.create("bias", &[out_features], Init::Zeros, ParamKind::Trainable)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn copy_to(&self, b: &Builder) -> Result<Self> {
        Ok(Self {
            weight: copy_var(b, "weight", &self.weight, ParamKind::Trainable)?,
            bias: self.bias.as_ref().map(|v| copy_var(b, "bias", v, ParamKind::Trainable)).transpose()?,
        })
    }

    /// Applies the layer over the last dimension of `x`.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let w = param(&self.weight, train);
        let y = x.broadcast_matmul(&w.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&param(b, train))?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: Var,
    pub bias: Var,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &Builder, features: usize) -> Result<Self> {
        Ok(Self {
            weight: b.create("weight", &[features], Init::Const(1.0), ParamKind::Trainable)?,
            bias: b.create("bias", &[features], Init::Zeros, ParamKind::Trainable)?,
            eps: 1e-5,
        })
    }

    pub fn copy_to(&self, b: &Builder) -> Result<Self> {
        Ok(Self {
            weight: copy_var(b, "weight", &self.weight, ParamKind::Trainable)?,
            bias: copy_var(b, "bias", &self.bias, ParamKind::Trainable)?,
            eps: self.eps,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let y = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&param(&self.weight, train))?.broadcast_add(&param(&self.bias, train))?)
    }
}

/// Transposed convolution, kernel 2 stride 2.
#[derive(Clone, Debug)]
pub struct Deconv2x2 {
    pub weight: Var,
    pub bias: Var,
}

impl Deconv2x2 {
    pub fn new(b: &Builder, in_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(Self {
            weight: b.create("weight", &[in_channels, out_channels, 2, 2], Init::FanOut, ParamKind::Trainable)?,
            bias: b.create("bias", &[out_channels], Init::Zeros, ParamKind::Trainable)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn copy_to(&self, b: &Builder) -> Result<Self> {
        Ok(Self {
            weight: copy_var(b, "weight", &self.weight, ParamKind::Trainable)?,
            bias: copy_var(b, "bias", &self.bias, ParamKind::Trainable)?,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = ops::conv_transpose2x2(x, &param(&self.weight, train))?;
        Ok(y.broadcast_add(&channel_view(&param(&self.bias, train))?)?)
    }
}

/// Conv(3x3, padding 1, no bias) -> BatchNorm -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(b: &Builder, in_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&b.pp("conv"), in_channels, out_channels, 3, 1, 1, 1, false)?,
            bn: BatchNorm2d::new(&b.pp("bn"), out_channels)?,
        })
    }

    pub fn copy_to(&self, b: &Builder) -> Result<Self> {
        Ok(Self { conv: self.conv.copy_to(&b.pp("conv"))?, bn: self.bn.copy_to(&b.pp("bn"))? })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward_t(&self.conv.forward_t(x, train)?, train)?.relu()?)
    }
}
