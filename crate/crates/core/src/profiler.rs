//! Complexity accounting: parameter counts, multiply-accumulates,
//! activation memory, latency, and ratio tables against reference models.
//!
//! One multiply-accumulate is counted as one FLOP.

use std::fmt;
use std::time::Instant;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoder::{check_input_dims, EncoderVariant};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::nn::{BatchNorm2d, Conv2d, ConvBnRelu, Deconv2x2};

pub const FLOP_CONVENTION: &str = "1 multiply-accumulate = 1 FLOP";

type Shape = (usize, usize, usize);

fn elems((c, h, w): Shape) -> u64 {
    (c * h * w) as u64
}

/// Running totals of a static walk over a network for one image.
///
/// Two accountings are kept side by side. The analytic one counts the
/// multiply-accumulates each layer performs (`K²·Cin/g·Cout·Hout·Wout` for a
/// convolution, input positions for a transposed convolution, all attention
/// products) and every intermediate tensor. The layer-summary one follows
/// the rules of common per-layer model summary tools: every conv-like layer
/// costs `(weights + biases)·Hout·Wout`, other parametric layers cost their
/// parameter count, bare matrix products are free, and memory is the
/// outputs of parametric layers counted twice (forward and backward).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub macs: u64,
    /// Elements of every intermediate output produced by the walk.
    pub activation_elems: u64,
    pub summary_macs: u64,
    /// Elements output by layers that own parameters.
    pub summary_output_elems: u64,
}

impl Tally {
    /// Output of a parameter-free operation (activation, sum, concat).
    pub fn activation(&mut self, s: Shape) {
        self.activation_elems += elems(s);
    }

    pub fn conv(&mut self, conv: &Conv2d, (_, h, w): Shape) -> Shape {
        let (ho, wo) = conv.out_hw((h, w));
        let out = (conv.out_channels, ho, wo);
        let params = conv.weight.elem_count() + conv.bias.as_ref().map_or(0, |b| b.elem_count());
        self.macs += conv.macs((h, w));
        self.summary_macs += (params * ho * wo) as u64;
        self.parametric_output(out);
        out
    }

    pub fn deconv(&mut self, d: &Deconv2x2, (_, h, w): Shape) -> Shape {
        let out = (d.out_channels(), 2 * h, 2 * w);
        let params = d.weight.elem_count() + d.bias.elem_count();
        self.macs += (d.in_channels() * d.out_channels() * 4 * h * w) as u64;
        self.summary_macs += (params * 4 * h * w) as u64;
        self.parametric_output(out);
        out
    }

    /// Normalization layer with `params` affine parameters.
    pub fn norm(&mut self, params: usize, s: Shape) {
        self.summary_macs += params as u64;
        self.parametric_output(s);
    }

    /// Dense layer applied to `tokens` vectors.
    pub fn linear(&mut self, in_features: usize, out_features: usize, bias: bool, tokens: usize) {
        self.macs += (tokens * in_features * out_features) as u64;
        self.summary_macs += (in_features * out_features + if bias { out_features } else { 0 }) as u64;
        self.parametric_output((out_features, tokens, 1));
    }

    /// Parameter-free matrix product producing `out_elems` values.
    pub fn matmul(&mut self, macs: u64, out_elems: u64) {
        self.macs += macs;
        self.activation_elems += out_elems;
    }

    fn parametric_output(&mut self, s: Shape) {
        self.activation_elems += elems(s);
        self.summary_output_elems += elems(s);
    }
}

/// Static shape walk: adds the cost of a module to `tally` for an input of
/// shape `(channels, height, width)` and returns the output shape.
pub trait Profile {
    fn profile(&self, shape: Shape, tally: &mut Tally) -> Shape;
}

impl Profile for Conv2d {
    fn profile(&self, shape: Shape, tally: &mut Tally) -> Shape {
        tally.conv(self, shape)
    }
}

impl Profile for BatchNorm2d {
    fn profile(&self, shape: Shape, tally: &mut Tally) -> Shape {
        tally.norm(2 * self.channels(), shape);
        shape
    }
}

impl Profile for ConvBnRelu {
    fn profile(&self, shape: Shape, tally: &mut Tally) -> Shape {
        let s = self.conv.profile(shape, tally);
        self.bn.profile(s, tally);
        tally.activation(s);
        s
    }
}

impl Profile for Deconv2x2 {
    fn profile(&self, shape: Shape, tally: &mut Tally) -> Shape {
        tally.deconv(self, shape)
    }
}

/// Exact trainable-parameter count of the network in its current form.
pub fn count_params(network: &Network) -> usize {
    network.num_trainable()
}

/// Counting rules for FLOPs and memory; see [`Tally`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    #[default]
    Analytic,
    LayerSummary,
}

impl Convention {
    pub fn describe(self) -> &'static str {
        match self {
            Convention::Analytic => "analytic: every multiply-accumulate incl. attention products; memory = params + all intermediates + input",
            Convention::LayerSummary => {
                "layer-summary: (weights+biases) x output positions per conv-like layer, no bare matmuls; \
                 memory = params + 2 x parametric-layer outputs + input"
            }
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Convention::Analytic => "analytic",
            Convention::LayerSummary => "layer-summary",
        })
    }
}

pub fn tally(network: &Network, input_size: usize) -> Result<Tally> {
    check_input_dims(input_size, input_size)?;
    let mut t = Tally::default();
    network.profile((3, input_size, input_size), &mut t);
    Ok(t)
}

/// GFLOPs of one batch-1 forward pass on a square `input_size` image under
/// the analytic convention.
pub fn count_flops(network: &Network, input_size: usize) -> Result<f64> {
    count_flops_with(network, input_size, Convention::Analytic)
}

pub fn count_flops_with(network: &Network, input_size: usize, convention: Convention) -> Result<f64> {
    let t = tally(network, input_size)?;
    let macs = match convention {
        Convention::Analytic => t.macs,
        Convention::LayerSummary => t.summary_macs,
    };
    Ok(macs as f64 / 1e9)
}

/// Estimated inference memory in MB (10^6 bytes) at 32-bit precision for a
/// batch of one. Gradient buffers are not included.
pub fn estimated_size_mb(network: &Network, input_size: usize) -> Result<f64> {
    estimated_size_mb_with(network, input_size, Convention::Analytic)
}

pub fn estimated_size_mb_with(network: &Network, input_size: usize, convention: Convention) -> Result<f64> {
    let t = tally(network, input_size)?;
    let input = (3 * input_size * input_size) as u64;
    let outputs = match convention {
        Convention::Analytic => t.activation_elems,
        Convention::LayerSummary => 2 * t.summary_output_elems,
    };
    Ok((4 * (count_params(network) as u64 + outputs + input)) as f64 / 1e6)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl fmt::Display for Latency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean_ms, self.std_ms)
    }
}

/// Wall-clock time of evaluation-mode forward passes (post-processing
/// excluded). `std_ms` is the population standard deviation over repeats.
pub fn measure_latency(network: &Network, input_size: usize, batch: usize, repeats: usize, warmup: usize) -> Result<Latency> {
    if repeats == 0 || batch == 0 {
        return Err(Error::Config("latency needs at least one repeat and a positive batch".into()));
    }
    check_input_dims(input_size, input_size)?;
    let x = Tensor::rand(0f32, 1f32, (batch, 3, input_size, input_size), &Device::Cpu)?;
    for _ in 0..warmup {
        network.forward_t(&x, false)?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = network.forward_t(&x, false)?;
        drop(out);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let (mean, std) = mean_std(&times);
    Ok(Latency { mean_ms: mean, std_ms: std })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Costs at one square input size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeEntry {
    pub input_size: usize,
    pub gflops: f64,
    pub size_mb: f64,
    pub latency: Option<Latency>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub name: String,
    pub convention: Convention,
    pub params_millions: f64,
    pub entries: Vec<SizeEntry>,
    /// `true` for published figures shipped as constants.
    pub literature: bool,
    pub reparameterized: Option<bool>,
    pub hardware: Option<String>,
    /// Batch size used for latency measurements.
    pub latency_batch: Option<usize>,
}

impl ComplexityReport {
    pub fn entry(&self, input_size: usize) -> Option<&SizeEntry> {
        self.entries.iter().find(|e| e.input_size == input_size)
    }

    /// Flat `key=value` records.
    pub fn records(&self) -> Vec<String> {
        let mut out = vec![
            format!("model={}", self.name),
            format!("source={}", if self.literature { "literature" } else { "measured" }),
            format!("flop_convention={FLOP_CONVENTION}"),
            format!("counting={}", self.convention),
            format!("params_millions={:.4}", self.params_millions),
        ];
        if let Some(r) = self.reparameterized {
            out.push(format!("reparameterized={r}"));
        }
        if let Some(h) = &self.hardware {
            out.push(format!("hardware={h}"));
        }
        if let Some(b) = self.latency_batch {
            out.push(format!("latency_batch={b}"));
        }
        for e in &self.entries {
            let s = e.input_size;
            out.push(format!("gflops_{s}={:.4}", e.gflops));
            out.push(format!("size_mb_{s}={:.2}", e.size_mb));
            if let Some(l) = e.latency {
                out.push(format!("latency_ms_{s}={:.3}", l.mean_ms));
                out.push(format!("latency_std_ms_{s}={:.3}", l.std_ms));
            }
        }
        out
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let source = if self.literature { "published constants" } else { "measured" };
        writeln!(f, "{} ({source}; {FLOP_CONVENTION}; {} counting)", self.name, self.convention)?;
        if let Some(h) = &self.hardware {
            writeln!(f, "  hardware: {h}")?;
        }
        writeln!(f, "  parameters: {:.2} M", self.params_millions)?;
        writeln!(f, "  {:>6}  {:>10}  {:>12}  {:>18}", "input", "GFLOPs", "size (MB)", "latency (ms)")?;
        for e in &self.entries {
            let lat = e.latency.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
            writeln!(f, "  {:>6}  {:>10.2}  {:>12.2}  {:>18}", e.input_size, e.gflops, e.size_mb, lat)?;
        }
        if !self.literature && self.entries.iter().any(|e| e.latency.is_some()) {
            writeln!(f, "  latency covers the network forward pass only; post-processing excluded")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LatencySettings {
    pub batch: usize,
    pub repeats: usize,
    pub warmup: usize,
}

impl Default for LatencySettings {
    fn default() -> Self {
        Self { batch: 4, repeats: 100, warmup: 10 }
    }
}

/// Static report for `sizes`, plus latency when `latency` is given.
pub fn profile_network(
    network: &Network,
    name: &str,
    sizes: &[usize],
    convention: Convention,
    latency: Option<&LatencySettings>,
) -> Result<ComplexityReport> {
    let entries = sizes
        .iter()
        .map(|&s| {
            Ok(SizeEntry {
                input_size: s,
                gflops: count_flops_with(network, s, convention)?,
                size_mb: estimated_size_mb_with(network, s, convention)?,
                latency: latency.map(|l| measure_latency(network, s, l.batch, l.repeats, l.warmup)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComplexityReport {
        name: name.to_string(),
        convention,
        params_millions: count_params(network) as f64 / 1e6,
        entries,
        literature: false,
        reparameterized: Some(network.is_reparameterized()),
        hardware: latency.map(|_| hardware_description()),
        latency_batch: latency.map(|l| l.batch),
    })
}

pub fn hardware_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).map(|l| l.split(':').nth(1).unwrap_or("").trim().to_string()))
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("CPU {cpu}, {threads} thread(s)")
}

/// Reference model whose published figures ship as constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reference {
    CellVit256,
    CellVitSamH,
}

impl std::str::FromStr for Reference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cellvit256" | "cellvit-256" => Ok(Reference::CellVit256),
            "cellvit-sam-h" | "cellvitsamh" | "cellvit-samh" => Ok(Reference::CellVitSamH),
            _ => Err(Error::Config(format!("unknown reference model `{s}` (expected cellvit256 or cellvit-sam-h)"))),
        }
    }
}

fn literature_report(name: &str, params: f64, rows: [(usize, f64, f64, f64, f64); 2], reparameterized: Option<bool>) -> ComplexityReport {
    ComplexityReport {
        name: name.to_string(),
        convention: Convention::LayerSummary,
        params_millions: params,
        entries: rows
            .iter()
            .map(|&(s, g, mb, mean, std)| SizeEntry {
                input_size: s,
                gflops: g,
                size_mb: mb,
                latency: Some(Latency { mean_ms: mean, std_ms: std }),
            })
            .collect(),
        literature: true,
        reparameterized,
        hardware: Some("GPU Nvidia Tesla V100S 32 GB (published)".into()),
        latency_batch: Some(4),
    }
}

/// Published figures of a reference model (literature constants).
pub fn reference_report(r: Reference) -> ComplexityReport {
    match r {
        Reference::CellVit256 => literature_report(
            "CellViT-256",
            46.75,
            [(256, 132.89, 1859.98, 35.71, 0.37), (1024, 2125.94, 26953.06, 1169.7, 148.92)],
            None,
        ),
        Reference::CellVitSamH => literature_report(
            "CellViT-SAM-H",
            699.74,
            [(256, 214.20, 6002.34, 103.89, 0.97), (1024, 3413.41, 45612.96, 2389.14, 150.18)],
            None,
        ),
    }
}

/// Published NuLite figures per encoder (literature constants).
pub fn published_nulite_report(variant: EncoderVariant, reparameterized: bool) -> ComplexityReport {
    use EncoderVariant::*;
    type Row = (f64, [(usize, f64, f64, f64, f64); 2]);
    let row: Row = match (variant, reparameterized) {
        (T8, false) => (5.28, [(256, 10.83, 380.01, 13.42, 0.77), (1024, 173.22, 5764.12, 178.89, 18.05)]),
        (T12, false) => (10.13, [(256, 19.36, 528.54, 14.87, 0.45), (1024, 309.70, 7850.22, 214.77, 23.66)]),
        (S12, false) => (12.05, [(256, 19.76, 546.18, 14.76, 0.41), (1024, 316.16, 8017.28, 212.3, 21.4)]),
        (SA12, false) => (14.16, [(256, 19.76, 555.41, 14.78, 0.83), (1024, 316.18, 8038.31, 212.98, 23.6)]),
        (SA24, false) => (24.13, [(256, 21.46, 715.31, 21.84, 0.35), (1024, 343.22, 9999.14, 267.83, 24.81)]),
        (SA36, false) => (34.10, [(256, 23.15, 875.21, 29.99, 1.79), (1024, 370.25, 11959.97, 310.44, 24.64)]),
        (MA36, false) => (47.93, [(256, 32.54, 1067.91, 33.37, 1.34), (1024, 520.45, 14214.10, 446.3, 35.25)]),
        (T8, true) => (5.26, [(256, 10.82, 341.02, 9.11, 0.54), (1024, 173.17, 5141.21, 159.97, 18.11)]),
        (T12, true) => (10.09, [(256, 19.35, 472.35, 10.0, 0.27), (1024, 309.65, 6952.55, 187.04, 20.67)]),
        (S12, true) => (12.01, [(256, 19.76, 489.99, 9.96, 0.23), (1024, 316.11, 7119.61, 189.04, 16.61)]),
        (SA12, true) => (14.13, [(256, 19.76, 501.34, 10.45, 0.27), (1024, 316.13, 7174.21, 197.35, 19.55)]),
        (SA24, true) => (24.08, [(256, 21.45, 623.45, 14.69, 0.86), (1024, 343.16, 8531.03, 225.49, 18.37)]),
        (SA36, true) => (34.04, [(256, 23.14, 745.57, 18.66, 0.4), (1024, 370.20, 9887.84, 266.82, 19.13)]),
        (MA36, true) => (47.85, [(256, 32.53, 913.95, 23.05, 0.86), (1024, 520.39, 11753.44, 402.67, 30.99)]),
    };
    let suffix = if reparameterized { "-Rep" } else { "" };
    literature_report(&format!("NuLite{suffix} (FastViT-{variant})"), row.0, row.1, Some(reparameterized))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub input_size: usize,
    pub gflops: f64,
    pub size: f64,
    pub latency: Option<f64>,
}

/// How many times larger (or slower) `reference` is than `subject`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupTable {
    pub reference: String,
    pub subject: String,
    pub params: f64,
    pub rows: Vec<SpeedupRow>,
}

fn ratio(a: f64, b: f64, what: &str) -> Result<f64> {
    if b == 0.0 {
        return Err(Error::Config(format!("cannot form {what} ratio: denominator is zero")));
    }
    Ok(a / b)
}

/// Elementwise `reference / subject` over parameters and every input size
/// present in both reports.
pub fn speedup_table(reference: &ComplexityReport, subject: &ComplexityReport) -> Result<SpeedupTable> {
    let mut rows = Vec::new();
    for e in &reference.entries {
        let Some(s) = subject.entry(e.input_size) else { continue };
        let latency = match (e.latency, s.latency) {
            (Some(a), Some(b)) => Some(ratio(a.mean_ms, b.mean_ms, "latency")?),
            _ => None,
        };
        rows.push(SpeedupRow {
            input_size: e.input_size,
            gflops: ratio(e.gflops, s.gflops, "GFLOPs")?,
            size: ratio(e.size_mb, s.size_mb, "size")?,
            latency,
        });
    }
    Ok(SpeedupTable {
        reference: reference.name.clone(),
        subject: subject.name.clone(),
        params: ratio(reference.params_millions, subject.params_millions, "parameter")?,
        rows,
    })
}

impl fmt::Display for SpeedupTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} relative to {}", self.reference, self.subject)?;
        writeln!(f, "  parameters: {:.2}x", self.params)?;
        writeln!(f, "  {:>6}  {:>8}  {:>8}  {:>8}", "input", "GFLOPs", "size", "latency")?;
        for r in &self.rows {
            let lat = r.latency.map(|l| format!("{l:.2}x")).unwrap_or_else(|| "-".into());
            writeln!(f, "  {:>6}  {:>7.2}x  {:>7.2}x  {:>8}", r.input_size, r.gflops, r.size, lat)?;
        }
        Ok(())
    }
}
