//! The full segmentation network: encoder, five-layer decoder with skip
//! connections, three pixel heads and the tissue classifier.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::{check_input_dims, Encoder, EncoderConfig, EncoderVariant, FeaturePyramid, TissueClassifier};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvBnRelu, Deconv2x2, ParamStore};
use crate::profiler::{Profile, Tally};

/// PanNuke: background plus five nucleus classes.
pub const PANNUKE_NUCLEI_CLASSES: usize = 6;
pub const PANNUKE_TISSUE_CLASSES: usize = 19;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub encoder: EncoderConfig,
    /// Channels of the type head, background included.
    pub num_nuclei_classes: usize,
    pub num_tissue_classes: usize,
}

impl NetworkConfig {
    pub fn new(variant: EncoderVariant, num_nuclei_classes: usize, num_tissue_classes: usize) -> Self {
        Self { encoder: EncoderConfig::new(variant), num_nuclei_classes, num_tissue_classes }
    }

    pub fn preset(preset: Preset) -> Self {
        Self::new(preset.encoder_variant(), PANNUKE_NUCLEI_CLASSES, PANNUKE_TISSUE_CLASSES)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_nuclei_classes < 2 {
            return Err(Error::Config(format!(
                "type head needs background plus at least one class, got {}",
                self.num_nuclei_classes
            )));
        }
        if self.num_tissue_classes < 2 {
            return Err(Error::Config(format!("need at least 2 tissue classes, got {}", self.num_tissue_classes)));
        }
        Ok(())
    }
}

/// Named network sizes. `NuLiteMSa36` and `NuLiteHMa36` are the alternative
/// backbone assignment for the medium and huge models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    NuLiteT,
    NuLiteM,
    NuLiteH,
    NuLiteMSa36,
    NuLiteHMa36,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::NuLiteT, Preset::NuLiteM, Preset::NuLiteH, Preset::NuLiteMSa36, Preset::NuLiteHMa36];

    pub fn encoder_variant(self) -> EncoderVariant {
        match self {
            Preset::NuLiteT => EncoderVariant::S12,
            Preset::NuLiteM => EncoderVariant::SA24,
            Preset::NuLiteH | Preset::NuLiteMSa36 => EncoderVariant::SA36,
            Preset::NuLiteHMa36 => EncoderVariant::MA36,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::NuLiteT => "NuLite-T",
            Preset::NuLiteM => "NuLite-M",
            Preset::NuLiteH => "NuLite-H",
            Preset::NuLiteMSa36 => "NuLite-M-SA36",
            Preset::NuLiteHMa36 => "NuLite-H-MA36",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown network variant `{s}`")))
    }
}

/// Batched network outputs.
#[derive(Clone, Debug)]
pub struct NetworkOutput {
    /// `[B, 2, H, W]` background / nucleus scores.
    pub np_logits: Tensor,
    /// `[B, 2, H, W]`; channel 0 horizontal, channel 1 vertical.
    pub hv_map: Tensor,
    /// `[B, C, H, W]`
    pub nt_logits: Tensor,
    /// `[B, num_tissue_classes]`
    pub tissue_logits: Tensor,
}

impl NetworkOutput {
    /// Output of image `i` with the batch axis kept (size 1).
    pub fn item(&self, i: usize) -> Result<NetworkOutput> {
        Ok(NetworkOutput {
            np_logits: self.np_logits.narrow(0, i, 1)?,
            hv_map: self.hv_map.narrow(0, i, 1)?,
            nt_logits: self.nt_logits.narrow(0, i, 1)?,
            tissue_logits: self.tissue_logits.narrow(0, i, 1)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.np_logits.dims()[0]
    }
}

/// One decoder or head stage with its `(channels, height, width)` in and out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeRow {
    pub name: &'static str,
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    convs: Vec<ConvBnRelu>,
    deconv: Deconv2x2,
}

impl DecoderLayer {
    fn new(b: &Builder, widths: &[usize]) -> Result<Self> {
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| ConvBnRelu::new(&b.pp(format!("conv{i}")), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        let last = *widths.last().expect("non-empty widths");
        Ok(Self { convs, deconv: Deconv2x2::new(&b.pp("deconv"), last, last)? })
    }

    fn in_channels(&self) -> usize {
        self.convs[0].conv.in_channels
    }

    fn out_channels(&self) -> usize {
        self.deconv.out_channels()
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        for c in &self.convs {
            y = c.forward_t(&y, train)?;
        }
        self.deconv.forward_t(&y, train)
    }

    fn copy_to(&self, b: &Builder) -> Result<Self> {
        Ok(Self {
            convs: self.convs.iter().enumerate().map(|(i, c)| c.copy_to(&b.pp(format!("conv{i}")))).collect::<Result<_>>()?,
            deconv: self.deconv.copy_to(&b.pp("deconv"))?,
        })
    }
}

impl Profile for DecoderLayer {
    fn profile(&self, shape: (usize, usize, usize), tally: &mut Tally) -> (usize, usize, usize) {
        let mut s = shape;
        for c in &self.convs {
            s = c.profile(s, tally);
        }
        self.deconv.profile(s, tally)
    }
}

#[derive(Clone, Debug)]
struct Head {
    hidden: ConvBnRelu,
    out: Conv2d,
}

impl Head {
    fn new(b: &Builder, in_channels: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            hidden: ConvBnRelu::new(&b.pp("hidden"), in_channels, hidden)?,
            out: Conv2d::new(&b.pp("out"), hidden, out, 1, 1, 0, 1, true)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.out.forward_t(&self.hidden.forward_t(x, train)?, train)
    }

    fn copy_to(&self, b: &Builder) -> Result<Self> {
        Ok(Self { hidden: self.hidden.copy_to(&b.pp("hidden"))?, out: self.out.copy_to(&b.pp("out"))? })
    }
}

impl Profile for Head {
    fn profile(&self, shape: (usize, usize, usize), tally: &mut Tally) -> (usize, usize, usize) {
        let s = self.hidden.profile(shape, tally);
        self.out.profile(s, tally)
    }
}

/// Segmentation network together with the store that owns its tensors.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    store: ParamStore,
    encoder: Encoder,
    tissue: TissueClassifier,
    stem_skip: ConvBnRelu,
    decoder: [DecoderLayer; 5],
    np_head: Head,
    hv_head: Head,
    nt_head: Head,
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    let (_, c, h, w) = t.dims4()?;
    Ok((c, h, w))
}

fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(Tensor::cat(&[a, b], 1)?)
}

impl Network {
    /// Builds a network with freshly initialized weights.
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new();
        let root = Builder::new(&store, seed);
        let encoder = Encoder::new(&root.pp("encoder"), &config.encoder)?;
        let [z, z2, z4, z8] = config.encoder.stage_widths();
        let tissue = TissueClassifier::new(&root.pp("tissue_head"), z8, config.num_tissue_classes)?;
        let db = root.pp("decoder");
        let decoder = [
            DecoderLayer::new(&db.pp("dec1"), &[z8, z4])?,
            DecoderLayer::new(&db.pp("dec2"), &[z4 + z4, z4, z2])?,
            DecoderLayer::new(&db.pp("dec3"), &[z2 + z2, z2, z])?,
            DecoderLayer::new(&db.pp("dec4"), &[z + z, z])?,
            DecoderLayer::new(&db.pp("dec5"), &[z, z])?,
        ];
        let stem_skip = ConvBnRelu::new(&root.pp("stem_skip"), 3, z)?;
        let head_in = decoder[4].out_channels() + z;
        let net = Self {
            np_head: Head::new(&root.pp("np_head"), head_in, z, 2)?,
            hv_head: Head::new(&root.pp("hv_head"), head_in, z, 2)?,
            nt_head: Head::new(&root.pp("nt_head"), head_in, z, config.num_nuclei_classes)?,
            config: config.clone(),
            store,
            encoder,
            tissue,
            stem_skip,
            decoder,
        };
        net.check_channels()?;
        Ok(net)
    }

    /// Verifies every concatenation closes before any forward pass runs.
    fn check_channels(&self) -> Result<()> {
        let [z, z2, z4, z8] = self.config.encoder.stage_widths();
        let d = &self.decoder;
        let expected = [
            ("DEC.1", d[0].in_channels(), z8),
            ("DEC.2", d[1].in_channels(), d[0].out_channels() + z4),
            ("DEC.3", d[2].in_channels(), d[1].out_channels() + z2),
            ("DEC.4", d[3].in_channels(), d[2].out_channels() + z),
            ("DEC.5", d[4].in_channels(), d[3].out_channels()),
            ("heads", self.np_head.hidden.conv.in_channels, d[4].out_channels() + self.stem_skip.conv.out_channels),
        ];
        for (name, got, want) in expected {
            if got != want {
                return Err(Error::Config(format!("{name} expects {got} input channels but receives {want}")));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn is_reparameterized(&self) -> bool {
        self.encoder.is_reparameterized()
    }

    pub fn num_trainable(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<NetworkOutput> {
        self.run(x, train, None)
    }

    /// Evaluation-mode forward that also records the decoder and head shapes.
    pub fn forward_traced(&self, x: &Tensor) -> Result<(NetworkOutput, Vec<ShapeRow>)> {
        let mut rows = Vec::with_capacity(8);
        let out = self.run(x, false, Some(&mut rows))?;
        Ok((out, rows))
    }

    fn run(&self, x: &Tensor, train: bool, mut trace: Option<&mut Vec<ShapeRow>>) -> Result<NetworkOutput> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        check_input_dims(h, w)?;
        let pyramid: FeaturePyramid = self.encoder.forward_t(x, train)?;
        let tissue_logits = self.tissue.tissue_logits(&pyramid, train)?;

        let mut record = |name: &'static str, input: &Tensor, output: &Tensor| -> Result<()> {
            if let Some(t) = trace.as_deref_mut() {
                t.push(ShapeRow { name, input: dims3(input)?, output: dims3(output)? });
            }
            Ok(())
        };
        let skips = [&pyramid.s3, &pyramid.s2, &pyramid.s1];
        let names = ["DEC.1", "DEC.2", "DEC.3", "DEC.4", "DEC.5"];
        let mut y = self.decoder[0].forward_t(&pyramid.s4, train)?;
        record(names[0], &pyramid.s4, &y)?;
        for i in 1..5 {
            let input = if i <= 3 { concat(&y, skips[i - 1])? } else { y.clone() };
            y = self.decoder[i].forward_t(&input, train)?;
            record(names[i], &input, &y)?;
        }
        drop(pyramid);
        let stem = self.stem_skip.forward_t(x, train)?;
        let features = concat(&y, &stem)?;
        drop((y, stem));
        let np_logits = self.np_head.forward_t(&features, train)?;
        record("NP.HEAD", &features, &np_logits)?;
        let hv_map = self.hv_head.forward_t(&features, train)?;
        record("HV.HEAD", &features, &hv_map)?;
        let nt_logits = self.nt_head.forward_t(&features, train)?;
        record("NC.HEAD", &features, &nt_logits)?;
        Ok(NetworkOutput { np_logits, hv_map, nt_logits, tissue_logits })
    }

    /// Inference-form copy with a fused encoder in a new store. Decoder,
    /// heads and classifier tensors are copied unchanged.
    pub fn reparameterize(&self) -> Result<Network> {
        let store = ParamStore::new();
        let root = Builder::new(&store, 0);
        let encoder = self.encoder.reparameterize(&root.pp("encoder"))?;
        let db = root.pp("decoder");
        let decoder = [0, 1, 2, 3, 4].map(|i| self.decoder[i].copy_to(&db.pp(format!("dec{}", i + 1))));
        let [d0, d1, d2, d3, d4] = decoder;
        let mut config = self.config.clone();
        config.encoder = encoder.config().clone();
        Ok(Network {
            tissue: self.tissue.copy_to(&root.pp("tissue_head"))?,
            stem_skip: self.stem_skip.copy_to(&root.pp("stem_skip"))?,
            decoder: [d0?, d1?, d2?, d3?, d4?],
            np_head: self.np_head.copy_to(&root.pp("np_head"))?,
            hv_head: self.hv_head.copy_to(&root.pp("hv_head"))?,
            nt_head: self.nt_head.copy_to(&root.pp("nt_head"))?,
            encoder,
            config,
            store,
        })
    }

    /// Empty network of the right form for loading a checkpoint: branch form
    /// when `reparameterized` is false, fused form otherwise. Fused tensors
    /// are placeholders until [`ParamStore::load_tensors`] overwrites them.
    pub fn skeleton(config: &NetworkConfig, reparameterized: bool) -> Result<Network> {
        let mut branch_config = config.clone();
        branch_config.encoder.train_mode = true;
        let net = Network::new(&branch_config, 0)?;
        if !reparameterized {
            return Ok(net);
        }
        mark_calibrated(&net.store)?;
        net.reparameterize()
    }

    /// Parameter count of the decoder, stem skip and heads.
    pub fn decoder_param_count(&self) -> usize {
        self.store
            .trainable()
            .iter()
            .filter(|(name, _)| {
                ["decoder.", "stem_skip.", "np_head.", "hv_head.", "nt_head."].iter().any(|p| name.starts_with(p))
            })
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Zeroes the final 1x1 convolution of every head (used by tests and for
    /// a neutral starting point).
    pub fn zero_head_outputs(&self) -> Result<()> {
        for head in [&self.np_head, &self.hv_head, &self.nt_head] {
            head.out.weight.set(&head.out.weight.zeros_like()?)?;
            if let Some(b) = &head.out.bias {
                b.set(&b.zeros_like()?)?;
            }
        }
        Ok(())
    }

    /// Store-name prefix of a head's parameters.
    pub fn head_param_prefix(head: HeadKind) -> &'static str {
        match head {
            HeadKind::Np => "np_head.",
            HeadKind::Hv => "hv_head.",
            HeadKind::Nt => "nt_head.",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Np,
    Hv,
    Nt,
}

fn mark_calibrated(store: &ParamStore) -> Result<()> {
    for (name, p) in store.entries() {
        if name.ends_with("num_batches_tracked") {
            p.var.set(&p.var.ones_like()?)?;
        }
    }
    Ok(())
}

impl Profile for Network {
    fn profile(&self, shape: (usize, usize, usize), tally: &mut Tally) -> (usize, usize, usize) {
        let (_, h, w) = shape;
        let s4 = self.encoder.profile(shape, tally);
        let [z, z2, z4, _] = self.config.encoder.stage_widths();
        tally.activation((s4.0, 1, 1));
        tally.linear(s4.0, self.tissue.num_classes(), true, 1);
        let mut s = self.decoder[0].profile(s4, tally);
        for (i, skip) in [z4, z2, z].into_iter().enumerate() {
            let cat = (s.0 + skip, s.1, s.2);
            tally.activation(cat);
            s = self.decoder[i + 1].profile(cat, tally);
        }
        s = self.decoder[4].profile(s, tally);
        let stem = self.stem_skip.profile(shape, tally);
        let cat = (s.0 + stem.0, h, w);
        tally.activation(cat);
        self.np_head.profile(cat, tally);
        self.hv_head.profile(cat, tally);
        self.nt_head.profile(cat, tally)
    }
}

/// Creates a NuLite preset with PanNuke class counts.
pub fn variant(preset: Preset) -> NetworkConfig {
    NetworkConfig::preset(preset)
}
