//! Composite training objective: per-head FTL / Dice / BCE / MSE / MSGE terms
//! plus tissue cross-entropy, all built from differentiable tensor ops.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::network::NetworkOutput;
use crate::{Error, Result};

/// Focal Tversky parameters and the denominator smoothing shared with Dice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtlParams {
    /// Weight of false negatives.
    pub alpha: f64,
    /// Weight of false positives.
    pub beta: f64,
    pub gamma: f64,
    pub smooth: f64,
}

impl Default for FtlParams {
    fn default() -> Self {
        Self { alpha: 0.7, beta: 0.3, gamma: 4.0 / 3.0, smooth: 1e-5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub np_ftl: f64,
    pub np_dice: f64,
    pub hv_mse: f64,
    pub hv_msge: f64,
    pub nt_ftl: f64,
    pub nt_dice: f64,
    pub nt_bce: f64,
    pub tc_ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            np_ftl: 1.0,
            np_dice: 1.0,
            hv_mse: 1.0,
            hv_msge: 2.0,
            nt_ftl: 1.0,
            nt_dice: 1.0,
            nt_bce: 1.0,
            tc_ce: 0.5,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 8] {
        [
            self.np_ftl,
            self.np_dice,
            self.hv_mse,
            self.hv_msge,
            self.nt_ftl,
            self.nt_dice,
            self.nt_bce,
            self.tc_ce,
        ]
    }

    pub fn scaled(&self, k: f64) -> Self {
        let w = self.as_array().map(|v| v * k);
        Self {
            np_ftl: w[0],
            np_dice: w[1],
            hv_mse: w[2],
            hv_msge: w[3],
            nt_ftl: w[4],
            nt_dice: w[5],
            nt_bce: w[6],
            tc_ce: w[7],
        }
    }

    /// Every weight finite and nonnegative, and each segmentation head keeps
    /// at least one active term.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in TERM_NAMES.iter().zip(self.as_array()) {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        let heads = [
            ("np", self.np_ftl + self.np_dice),
            ("hv", self.hv_mse + self.hv_msge),
            ("nt", self.nt_ftl + self.nt_dice + self.nt_bce),
        ];
        for (head, sum) in heads {
            if sum <= 0.0 {
                return Err(Error::Config(format!("all loss weights of the {head} head are zero")));
            }
        }
        Ok(())
    }
}

/// Order of the entries in [`LossWeights::as_array`] and [`LossTerms::as_array`].
pub const TERM_NAMES: [&str; 8] =
    ["np_ftl", "np_dice", "hv_mse", "hv_msge", "nt_ftl", "nt_dice", "nt_bce", "tc_ce"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub ftl: FtlParams,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let f = &self.ftl;
        let ok = f.alpha.is_finite()
            && f.beta.is_finite()
            && f.alpha >= 0.0
            && f.beta >= 0.0
            && f.gamma.is_finite()
            && f.gamma > 0.0
            && f.smooth.is_finite()
            && f.smooth >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid focal Tversky parameters {f:?}")));
        }
        Ok(())
    }
}

/// Batched training targets on the device.
#[derive(Clone, Debug)]
pub struct TargetBatch {
    /// `[B, H, W]` float, 1 on nuclei.
    pub np: Tensor,
    /// `[B, 2, H, W]` float in `[-1, 1]`.
    pub hv: Tensor,
    /// `[B, H, W]` u32 class indices, 0 = background.
    pub nt: Tensor,
    /// `[B]` u32 tissue indices.
    pub tissue: Tensor,
}

/// Weighted value of each component (already multiplied by its weight).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub np_ftl: f64,
    pub np_dice: f64,
    pub hv_mse: f64,
    pub hv_msge: f64,
    pub nt_ftl: f64,
    pub nt_dice: f64,
    pub nt_bce: f64,
    pub tc_ce: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 8] {
        [
            self.np_ftl,
            self.np_dice,
            self.hv_mse,
            self.hv_msge,
            self.nt_ftl,
            self.nt_dice,
            self.nt_bce,
            self.tc_ce,
        ]
    }

    pub fn sum(&self) -> f64 {
        self.as_array().iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    /// Differentiable scalar.
    pub total: Tensor,
    pub terms: LossTerms,
}

impl LossBreakdown {
    pub fn total_value(&self) -> Result<f64> {
        scalar(&self.total)
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        TERM_NAMES.iter().zip(self.terms.as_array()).find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Softmax over axis 1 in max-subtraction form.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let shifted = logits.broadcast_sub(&logits.max_keepdim(1)?.detach())?;
    let e = shifted.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// Log-softmax over axis 1 in max-subtraction form.
pub fn log_softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let shifted = logits.broadcast_sub(&logits.max_keepdim(1)?.detach())?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `[B, H, W]` class indices to a `[B, C, H, W]` one-hot tensor of `dtype`.
pub fn one_hot(index: &Tensor, classes: usize, dtype: DType) -> Result<Tensor> {
    let (b, h, w) = index.dims3()?;
    let idx = index.to_dtype(DType::U32)?;
    if b * h * w > 0 {
        let max = idx.flatten_all()?.max(0)?.to_scalar::<u32>()? as usize;
        if max >= classes {
            return Err(Error::Shape(format!("class index {max} out of range for {classes} classes")));
        }
    }
    let cls = Tensor::arange(0u32, classes as u32, index.device())?.reshape((1, classes, 1, 1))?;
    let hot = idx.unsqueeze(1)?.broadcast_eq(&cls)?;
    Ok(hot.to_dtype(dtype)?)
}

/// Per-channel sums over batch and space: `[B, C, H, W]` to `[C]`.
fn channel_sums(x: &Tensor) -> Result<Tensor> {
    Ok(x.sum(3)?.sum(2)?.sum(0)?)
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: prediction {:?} vs target {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Soft Dice loss `1 - 2·Σpt / (Σp + Σt + smooth)` per channel, averaged over
/// channels. Inputs are `[B, C, H, W]` probabilities and one-hot targets.
pub fn dice_loss(prob: &Tensor, target: &Tensor, smooth: f64) -> Result<Tensor> {
    check_same(prob, target, "dice")?;
    let inter = channel_sums(&(prob * target)?)?;
    let denom = (channel_sums(prob)? + channel_sums(target)?)?.affine(1.0, smooth)?;
    let score = (inter * 2.0)?.div(&denom)?;
    Ok(score.affine(-1.0, 1.0)?.mean_all()?)
}

/// Focal Tversky loss `(1 - TI)^γ` with `TI = TP / (TP + α·FN + β·FP + smooth)`
/// per channel, averaged over channels.
pub fn focal_tversky_loss(prob: &Tensor, target: &Tensor, p: &FtlParams) -> Result<Tensor> {
    check_same(prob, target, "focal tversky")?;
    let tp = channel_sums(&(prob * target)?)?;
    let fn_ = channel_sums(&(target * prob.affine(-1.0, 1.0)?)?)?;
    let fp = channel_sums(&(prob * target.affine(-1.0, 1.0)?)?)?;
    let denom = ((&tp + (fn_ * p.alpha)?)? + (fp * p.beta)?)?.affine(1.0, p.smooth)?;
    let ti = tp.div(&denom)?;
    // 1 - TI is clamped at 0 so the power stays differentiable under rounding.
    let comp = ti.affine(-1.0, 1.0)?.relu()?;
    let loss = if p.gamma == 1.0 { comp } else { comp.powf(p.gamma)? };
    Ok(loss.mean_all()?)
}

/// Mean binary cross-entropy over every channel and pixel, taking the
/// channels of softmax(`logits`) as independent Bernoulli probabilities.
pub fn bce_on_softmax(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(logits, target, "bce")?;
    let log_p = log_softmax_channels(logits)?;
    let p = log_p.exp()?;
    let eps = if logits.dtype() == DType::F64 { 1e-12 } else { 1e-7 };
    let log_q = p.affine(-1.0, 1.0)?.clamp(eps, 1.0)?.log()?;
    let pos = (target * log_p)?;
    let neg = (target.affine(-1.0, 1.0)? * log_q)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// Mean cross-entropy of `[B, K]` logits against `[B]` indices.
pub fn cross_entropy(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if target.dims() != [b] {
        return Err(Error::Shape(format!("cross entropy target {:?} for logits {:?}", target.dims(), logits.dims())));
    }
    let log_p = log_softmax_channels(logits)?;
    let hot = one_hot(&target.reshape((b, 1, 1))?, k, logits.dtype())?.reshape((b, k))?;
    Ok((log_p * hot)?.sum(1)?.mean(0)?.neg()?)
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(pred, target, "mse")?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Five-tap central difference `(x[i-2] - 8x[i-1] + 8x[i+1] - x[i+2]) / 12`
/// along `axis` with reflection padding (edge sample not repeated).
pub fn central_difference(x: &Tensor, axis: usize) -> Result<Tensor> {
    let n = x.dims()[axis];
    if n < 3 {
        return Err(Error::Shape(format!("central difference needs at least 3 samples, axis has {n}")));
    }
    let at = |i: usize| x.narrow(axis, i, 1);
    let padded = Tensor::cat(&[&at(2)?, &at(1)?, x, &at(n - 2)?, &at(n - 3)?], axis)?;
    let s = |off: usize| padded.narrow(axis, off, n);
    let d = ((s(0)? - (s(1)? * 8.0)?)? + (s(3)? * 8.0)?)?.sub(&s(4)?)?;
    Ok((d / 12.0)?)
}

/// Horizontal derivative of channel 0 and vertical derivative of channel 1 of
/// a `[B, 2, H, W]` map.
pub fn hv_gradient(hv: &Tensor) -> Result<Tensor> {
    let dh = central_difference(&hv.narrow(1, 0, 1)?, 3)?;
    let dv = central_difference(&hv.narrow(1, 1, 1)?, 2)?;
    Ok(Tensor::cat(&[&dh, &dv], 1)?)
}

/// Mean over nuclear pixels (and both channels) of the squared difference of
/// the HV gradients; zero for an empty mask.
pub fn msge(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_same(pred, target, "msge")?;
    let diff = (hv_gradient(pred)? - hv_gradient(target)?)?.sqr()?;
    let m = mask.to_dtype(pred.dtype())?.unsqueeze(1)?;
    let count = scalar(&m.sum_all()?)?;
    if count == 0.0 {
        return Ok(diff.sum_all()?.affine(0.0, 0.0)?);
    }
    Ok((diff.broadcast_mul(&m)?.sum_all()? / (2.0 * count))?)
}

/// Weighted terms of one head before they are summed.
struct Weighted(Vec<(f64, Tensor)>);

impl Weighted {
    fn total(&self, like: &Tensor) -> Result<Tensor> {
        let mut acc = Tensor::zeros((), like.dtype(), like.device())?;
        for (w, t) in &self.0 {
            if *w != 0.0 {
                acc = (acc + (t * *w)?)?;
            }
        }
        Ok(acc)
    }

    fn values(&self) -> Result<Vec<f64>> {
        self.0.iter().map(|(w, t)| Ok(if *w == 0.0 { 0.0 } else { w * scalar(t)? })).collect()
    }
}

fn np_terms(np_logits: &Tensor, np_target: &Tensor, cfg: &LossConfig) -> Result<Weighted> {
    let (b, c, h, w) = np_logits.dims4()?;
    if c != 2 || np_target.dims() != [b, h, w] {
        return Err(Error::Shape(format!("np logits {:?} vs target {:?}", np_logits.dims(), np_target.dims())));
    }
    let prob = softmax_channels(np_logits)?;
    let hot = one_hot(np_target, 2, np_logits.dtype())?;
    Ok(Weighted(vec![
        (cfg.weights.np_ftl, focal_tversky_loss(&prob, &hot, &cfg.ftl)?),
        (cfg.weights.np_dice, dice_loss(&prob, &hot, cfg.ftl.smooth)?),
    ]))
}

fn hv_terms(hv_pred: &Tensor, hv_target: &Tensor, np_target: &Tensor, cfg: &LossConfig) -> Result<Weighted> {
    Ok(Weighted(vec![
        (cfg.weights.hv_mse, mse(hv_pred, hv_target)?),
        (cfg.weights.hv_msge, msge(hv_pred, hv_target, np_target)?),
    ]))
}

fn nt_terms(nt_logits: &Tensor, nt_target: &Tensor, cfg: &LossConfig) -> Result<Weighted> {
    let (b, c, h, w) = nt_logits.dims4()?;
    if nt_target.dims() != [b, h, w] {
        return Err(Error::Shape(format!("nt logits {:?} vs target {:?}", nt_logits.dims(), nt_target.dims())));
    }
    let hot = one_hot(nt_target, c, nt_logits.dtype())?;
    let prob = softmax_channels(nt_logits)?;
    Ok(Weighted(vec![
        (cfg.weights.nt_ftl, focal_tversky_loss(&prob, &hot, &cfg.ftl)?),
        (cfg.weights.nt_dice, dice_loss(&prob, &hot, cfg.ftl.smooth)?),
        (cfg.weights.nt_bce, bce_on_softmax(nt_logits, &hot)?),
    ]))
}

/// Nucleus-prediction head: weighted FTL + Dice on the softmaxed 2-channel map.
pub fn loss_np(np_logits: &Tensor, np_target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    np_terms(np_logits, np_target, cfg)?.total(np_logits)
}

/// HV head: weighted MSE over all pixels + MSGE over nuclear pixels.
pub fn loss_hv(hv_pred: &Tensor, hv_target: &Tensor, np_target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    hv_terms(hv_pred, hv_target, np_target, cfg)?.total(hv_pred)
}

/// Nucleus-type head: weighted FTL + Dice + BCE against class indices.
pub fn loss_nt(nt_logits: &Tensor, nt_target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    nt_terms(nt_logits, nt_target, cfg)?.total(nt_logits)
}

pub fn loss_tc(tissue_logits: &Tensor, tissue_target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    Ok((cross_entropy(tissue_logits, tissue_target)? * cfg.weights.tc_ce)?)
}

/// Sum of the four head losses with the per-term breakdown.
pub fn loss_total(out: &NetworkOutput, targets: &TargetBatch, cfg: &LossConfig) -> Result<LossBreakdown> {
    let np = np_terms(&out.np_logits, &targets.np, cfg)?;
    let hv = hv_terms(&out.hv_map, &targets.hv, &targets.np, cfg)?;
    let nt = nt_terms(&out.nt_logits, &targets.nt, cfg)?;
    let tc = Weighted(vec![(cfg.weights.tc_ce, cross_entropy(&out.tissue_logits, &targets.tissue)?)]);
    let total = (((np.total(&out.np_logits)? + hv.total(&out.hv_map)?)? + nt.total(&out.nt_logits)?)?
        + tc.total(&out.tissue_logits)?)?;
    let (np, hv, nt, tc) = (np.values()?, hv.values()?, nt.values()?, tc.values()?);
    let terms = LossTerms {
        np_ftl: np[0],
        np_dice: np[1],
        hv_mse: hv[0],
        hv_msge: hv[1],
        nt_ftl: nt[0],
        nt_dice: nt[1],
        nt_bce: nt[2],
        tc_ce: tc[0],
    };
    Ok(LossBreakdown { total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    fn v(x: &Tensor) -> f64 {
        scalar(x).unwrap()
    }

    #[test]
    fn dice_closed_forms() {
        // 2 x 6 x 6 single-channel maps.
        let n = 36;
        let ones: Vec<f64> = (0..n).map(|i| (i < n / 2) as u8 as f64).collect();
        let rest: Vec<f64> = ones.iter().map(|x| 1.0 - x).collect();
        let a = t(&[ones.clone(), ones.clone()].concat(), &[2, 1, 6, 6]);
        let b = t(&[rest.clone(), rest.clone()].concat(), &[2, 1, 6, 6]);
        assert!((v(&dice_loss(&a, &b, 1e-5).unwrap()) - 1.0).abs() < 1e-6);
        assert!(v(&dice_loss(&a, &a, 1e-5).unwrap()).abs() < 1e-6);
        // Prediction equals target on half of the target's pixels.
        let half: Vec<f64> = (0..n).map(|i| ((i < n / 4) || (n / 2..3 * n / 4).contains(&i)) as u8 as f64).collect();
        let h = t(&[half.clone(), half].concat(), &[2, 1, 6, 6]);
        assert!((v(&dice_loss(&h, &a, 1e-5).unwrap()) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn ftl_reduces_to_dice_at_half_half_gamma_one() {
        let p = FtlParams { alpha: 0.5, beta: 0.5, gamma: 1.0, smooth: 1e-5 };
        let logits = Tensor::randn(0f64, 2.0, (2, 2, 6, 6), &Device::Cpu).unwrap();
        let target = Tensor::rand(0f64, 1.0, (2, 6, 6), &Device::Cpu).unwrap().ge(0.5).unwrap();
        let hot = one_hot(&target, 2, DType::F64).unwrap();
        let prob = softmax_channels(&logits).unwrap();
        let ftl = v(&focal_tversky_loss(&hot, &hot.affine(-1.0, 1.0).unwrap(), &p).unwrap());
        let dice = v(&dice_loss(&hot, &hot.affine(-1.0, 1.0).unwrap(), 1e-5).unwrap());
        assert!((ftl - dice).abs() < 1e-6);
        let ftl = v(&focal_tversky_loss(&prob, &hot, &p).unwrap());
        let dice = v(&dice_loss(&prob, &hot, 1e-5).unwrap());
        assert!((ftl - dice).abs() < 1e-6, "{ftl} vs {dice}");
    }

    #[test]
    fn bce_uniform_is_ln2() {
        let logits = Tensor::zeros((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let idx: Vec<u32> = (0..16).map(|i| i % 2).collect();
        let target = Tensor::from_vec(idx, (1, 4, 4), &Device::Cpu).unwrap();
        let hot = one_hot(&target, 2, DType::F64).unwrap();
        let bce = v(&bce_on_softmax(&logits, &hot).unwrap());
        assert!((bce - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn hv_offset_gives_mse_only() {
        let target = Tensor::randn(0f64, 1.0, (1, 2, 8, 8), &Device::Cpu).unwrap();
        let pred = (&target + 0.1).unwrap();
        let mask = Tensor::ones((1, 8, 8), DType::F64, &Device::Cpu).unwrap();
        assert!((v(&mse(&pred, &target).unwrap()) - 0.01).abs() < 1e-12);
        assert!(v(&msge(&pred, &target, &mask).unwrap()).abs() < 1e-20);
        let empty = mask.zeros_like().unwrap();
        let noise = Tensor::randn(0f64, 1.0, (1, 2, 8, 8), &Device::Cpu).unwrap();
        assert_eq!(v(&msge(&noise, &target, &empty).unwrap()), 0.0);
    }

    #[test]
    fn central_difference_is_exact_on_linear_ramp() {
        let x = t(&[0.0, 2.0, 4.0, 6.0, 8.0, 10.0], &[1, 6]);
        let d = central_difference(&x, 1).unwrap().to_vec2::<f64>().unwrap();
        for &g in &d[0][2..4] {
            assert!((g - 2.0).abs() < 1e-12);
        }
        // Reflection mirrors the ramp so the edge derivative vanishes.
        assert!(d[0][0].abs() < 1e-12);
    }

    #[test]
    fn class_index_out_of_range_is_rejected() {
        let logits = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let target = Tensor::full(3u32, (1, 4, 4), &Device::Cpu).unwrap();
        assert!(loss_nt(&logits, &target, &LossConfig::default()).is_err());
    }

    #[test]
    fn saturated_predictions_approach_zero() {
        let idx: Vec<u32> = (0..16).map(|i| (i % 3) as u32).collect();
        let target = Tensor::from_vec(idx, (1, 4, 4), &Device::Cpu).unwrap();
        let hot = one_hot(&target, 3, DType::F64).unwrap();
        let cfg = LossConfig::default();
        let mut last = f64::INFINITY;
        for scale in [1.0, 5.0, 20.0, 40.0] {
            let l = v(&loss_nt(&(&hot * scale).unwrap(), &target, &cfg).unwrap());
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-4, "{last}");
    }

    #[test]
    fn zero_weights_rejected_per_head() {
        let mut w = LossWeights::default();
        w.hv_mse = 0.0;
        w.hv_msge = 0.0;
        assert!(w.validate().is_err());
        let mut w = LossWeights::default();
        w.np_ftl = -1.0;
        assert!(w.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }

    #[test]
    fn msge_gradient_flows_to_prediction() {
        let pred = Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 2, 6, 6), &Device::Cpu).unwrap()).unwrap();
        let target = Tensor::randn(0f64, 1.0, (1, 2, 6, 6), &Device::Cpu).unwrap();
        let mask = Tensor::ones((1, 6, 6), DType::F64, &Device::Cpu).unwrap();
        let g = msge(pred.as_tensor(), &target, &mask).unwrap().backward().unwrap();
        let grad = g.get(pred.as_tensor()).unwrap();
        assert!(v(&grad.abs().unwrap().sum_all().unwrap()) > 0.0);
    }

    /// Central finite differences of `f` at `x` compared with autograd on the
    /// 50 largest-magnitude gradient entries.
    fn grad_check(x: &Tensor, f: impl Fn(&Tensor) -> Tensor) {
        let var = Var::from_tensor(x).unwrap();
        let grads = f(var.as_tensor()).backward().unwrap();
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        let h = 1e-3;
        for &i in order.iter().take(50) {
            let eval = |d: f64| {
                let mut p = base.clone();
                p[i] += d;
                v(&f(&Tensor::from_vec(p, x.dims(), &Device::Cpu).unwrap()))
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-12);
            assert!(rel < 1e-2, "entry {i}: autograd {} vs fd {fd}", g[i]);
        }
    }

    #[test]
    fn every_term_matches_finite_differences() {
        let dev = Device::Cpu;
        let logits = Tensor::randn(0f64, 1.5, (2, 2, 6, 6), &dev).unwrap();
        let idx = Tensor::rand(0f64, 1.0, (2, 6, 6), &dev).unwrap().ge(0.5).unwrap().to_dtype(DType::U32).unwrap();
        let hot = one_hot(&idx, 2, DType::F64).unwrap();
        let p = FtlParams::default();
        grad_check(&logits, |x| focal_tversky_loss(&softmax_channels(x).unwrap(), &hot, &p).unwrap());
        grad_check(&logits, |x| dice_loss(&softmax_channels(x).unwrap(), &hot, p.smooth).unwrap());
        grad_check(&logits, |x| bce_on_softmax(x, &hot).unwrap());
        let hv_t = Tensor::rand(-1f64, 1.0, (2, 2, 6, 6), &dev).unwrap();
        let hv_p = Tensor::randn(0f64, 1.0, (2, 2, 6, 6), &dev).unwrap();
        let mask = idx.to_dtype(DType::F64).unwrap();
        grad_check(&hv_p, |x| mse(x, &hv_t).unwrap());
        grad_check(&hv_p, |x| msge(x, &hv_t, &mask).unwrap());
        let tissue = Tensor::randn(0f64, 1.0, (2, 5), &dev).unwrap();
        let labels = Tensor::new(&[1u32, 4], &dev).unwrap();
        grad_check(&tissue, |x| cross_entropy(x, &labels).unwrap());
    }
}
