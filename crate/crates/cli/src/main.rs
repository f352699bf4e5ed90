use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use nulite_core::data::{
    convert_pannuke, load_pannuke, read_rgb, save_dataset, synthetic_disks, write_rgb, PannukeArrays, SyntheticConfig,
};
use nulite_core::encoder::EncoderVariant;
use nulite_core::instance::InstanceMap;
use nulite_core::network::{Network, NetworkConfig, Preset, PANNUKE_NUCLEI_CLASSES, PANNUKE_TISSUE_CLASSES};
use nulite_core::postprocess::read_detections;
use nulite_core::profiler::{
    profile_network, published_nulite_report, reference_report, speedup_table, Convention, LatencySettings, Reference,
};
use nulite_core::runtime::{
    evaluate_dirs, infer_direct, infer_tiled, list_images, load_checkpoint, plan_tiles, render_overlay, train,
    write_outputs, RunConfig, Trainer,
};

#[derive(Parser)]
#[command(name = "nulite", version, about = "Nuclei instance segmentation and classification")]
struct Cli {
    /// Seed for every stochastic step (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert PanNuke fold arrays (or generate synthetic disks) into the dataset layout.
    ConvertDataset(ConvertArgs),
    /// Train a network from a config file.
    Train(TrainArgs),
    /// Segment and classify every image in a directory.
    Infer(InferArgs),
    /// Score predictions against a ground-truth dataset directory.
    Eval(EvalArgs),
    /// Report parameters, GFLOPs, estimated size and optionally latency.
    Profile(ProfileArgs),
    /// Draw instance boundaries coloured by class onto an image.
    Overlay(OverlayArgs),
}

#[derive(Args)]
struct ConvertArgs {
    /// Directory containing images.npy, masks.npy and types.npy of one fold.
    #[arg(long, required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1)]
    fold: u32,
    /// Write this many synthetic disk images instead of converting.
    #[arg(long, conflicts_with = "input")]
    synthetic: Option<usize>,
    /// Side length of synthetic images.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    output: PathBuf,
    /// Dataset directory (overrides `data.root`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory of PNG images, or a dataset directory.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Tile side; images no larger than one tile run in a single pass.
    #[arg(long, default_value_t = 256)]
    tile: usize,
    #[arg(long, default_value_t = 64)]
    overlap: usize,
    /// Also write `<id>_overlay.png`.
    #[arg(long)]
    overlay: bool,
    /// Keep the branch-form encoder instead of fusing it.
    #[arg(long)]
    no_fuse: bool,
    /// Config whose `[postprocess]` section overrides the checkpoint's.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Type classes including background.
    #[arg(long, default_value_t = PANNUKE_NUCLEI_CLASSES)]
    classes: usize,
    #[arg(long, default_value_t = PANNUKE_TISSUE_CLASSES)]
    tissues: usize,
    /// Centroid pairing radius in pixels.
    #[arg(long, default_value_t = 12.0)]
    radius: f64,
    /// Write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CountingArg {
    Analytic,
    LayerSummary,
}

#[derive(Args)]
struct ProfileArgs {
    /// Preset (NuLite-T, NuLite-M, NuLite-H, NuLite-M-SA36, NuLite-H-MA36) or encoder (T8 .. MA36).
    #[arg(long, default_value = "NuLite-T")]
    variant: String,
    #[arg(long = "input-size", default_values_t = [256usize, 1024])]
    input_sizes: Vec<usize>,
    /// Speedup ratios relative to a reference model.
    #[arg(long)]
    compare: Option<String>,
    #[arg(long, value_enum, default_value_t = CountingArg::Analytic)]
    counting: CountingArg,
    /// Profile the multi-branch (training) form.
    #[arg(long)]
    branch: bool,
    /// Measure latency (batch 4, 100 repeats, 10 warmup).
    #[arg(long)]
    latency: bool,
    /// Also print the published figures for this variant.
    #[arg(long)]
    published: bool,
    /// Print `key=value` records instead of a table.
    #[arg(long)]
    records: bool,
}

#[derive(Args)]
struct OverlayArgs {
    #[arg(long)]
    image: PathBuf,
    /// 16-bit instance label PNG.
    #[arg(long)]
    instances: PathBuf,
    /// Detections JSONL giving each instance's class.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::ConvertDataset(a) => convert(a, seed),
        Command::Train(a) => train_cmd(a, seed),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Profile(a) => profile(a),
        Command::Overlay(a) => overlay(a),
    }
}

fn convert(a: ConvertArgs, seed: Option<u64>) -> Result<()> {
    if let Some(count) = a.synthetic {
        let cfg = SyntheticConfig { size: a.size, ..Default::default() };
        let images = synthetic_disks(count, &cfg, seed.unwrap_or(0));
        save_dataset(&a.output, &images)?;
        println!("wrote {count} synthetic images to {}", a.output.display());
        return Ok(());
    }
    let input = a.input.context("--input is required")?;
    let arrays = PannukeArrays::find(&input)?;
    let n = convert_pannuke(&arrays, &a.output, a.fold)?;
    println!("converted {n} images of fold {} to {}", a.fold, a.output.display());
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(d) = a.data {
        cfg.data.root = Some(d);
    }
    cfg.validate()?;
    let dataset = match (&cfg.data.root, &cfg.data.synthetic) {
        (Some(root), _) => {
            let mut all = load_pannuke(root, None, cfg.network.num_nuclei_classes, cfg.network.num_tissue_classes)?;
            if !cfg.data.train_folds.is_empty() {
                all.retain(|img| cfg.data.train_folds.contains(&img.fold));
            }
            all
        }
        (None, Some(s)) => synthetic_disks(s.count, &s.disks, s.seed),
        (None, None) => bail!("no training data: set data.root, data.synthetic or pass --data"),
    };
    if dataset.is_empty() {
        bail!("training set is empty");
    }
    log::info!("training {} on {} images for {} epochs", cfg.encoder.variant, dataset.len(), cfg.train.epochs);
    if let Some(path) = &a.resume {
        let ck = load_checkpoint(path)?;
        let mut trainer = Trainer::resume(cfg.clone(), &ck)?;
        std::fs::create_dir_all(&a.output)?;
        while trainer.epoch() < cfg.train.epochs {
            let s = trainer.train_epoch(&dataset, &mut |_| Ok(()))?;
            log::info!("epoch {} lr {:.3e} loss {:.4}", s.epoch, s.lr, s.mean_loss);
        }
        trainer.save(&a.output.join("last.safetensors"))?;
    } else {
        let network = Network::new(&cfg.network_config(), cfg.train.seed)?;
        let (_, summaries) = train(&cfg, &dataset, network, &a.output)?;
        if let Some(last) = summaries.last() {
            println!("finished {} epochs, final mean loss {:.4}", summaries.len(), last.mean_loss);
        }
    }
    println!("checkpoint: {}", a.output.join("last.safetensors").display());
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let mut network = ck.network()?;
    if !network.is_reparameterized() && !a.no_fuse {
        network = network.reparameterize()?;
    }
    let params = match (&a.config, &ck.meta.run) {
        (Some(p), _) => RunConfig::load(p)?.postprocess,
        (None, Some(run)) => run.postprocess,
        (None, None) => Default::default(),
    };
    let norm = ck.meta.normalization;
    let images = list_images(&a.input)?;
    if images.is_empty() {
        bail!("no PNG images in {}", a.input.display());
    }
    for (id, path) in images {
        let rgb = read_rgb(&path)?;
        let (_, h, w) = rgb.dim();
        let (inst, nuclei) = if h > a.tile || w > a.tile {
            let grid = plan_tiles(h, w, a.tile, a.overlap)?;
            infer_tiled(&network, &rgb, &grid, &norm, &params)?
        } else {
            infer_direct(&network, &rgb, &norm, &params)?
        };
        write_outputs(&a.output, &id, &rgb, &inst, &nuclei, a.overlay)?;
        println!("{id}: {} nuclei", nuclei.len());
    }
    Ok(())
}

/// Writes `text` to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let report = evaluate_dirs(&a.pred, &a.gt, a.classes, a.tissues, a.radius)?;
    if let Some(path) = &a.json {
        std::fs::write(path, serde_json::to_string_pretty(&report)?).with_context(|| path.display().to_string())?;
    }
    let mut out = format!("{report}\n");
    for r in report.records() {
        writeln!(out, "{r}")?;
    }
    emit(&out)
}

fn parse_variant(s: &str) -> Result<(String, EncoderVariant)> {
    if let Ok(p) = s.parse::<Preset>() {
        return Ok((p.name().to_string(), p.encoder_variant()));
    }
    let v: EncoderVariant = s.parse()?;
    Ok((format!("NuLite (FastViT-{v})"), v))
}

fn profile(a: ProfileArgs) -> Result<()> {
    let (name, variant) = parse_variant(&a.variant)?;
    let config = NetworkConfig::new(variant, PANNUKE_NUCLEI_CLASSES, PANNUKE_TISSUE_CLASSES);
    let reparameterized = !a.branch;
    let network = Network::skeleton(&config, reparameterized)?;
    let convention = match a.counting {
        CountingArg::Analytic => Convention::Analytic,
        CountingArg::LayerSummary => Convention::LayerSummary,
    };
    let latency = a.latency.then(LatencySettings::default);
    let report = profile_network(&network, &name, &a.input_sizes, convention, latency.as_ref())?;
    let mut out = String::new();
    if a.records {
        report.records().iter().try_for_each(|r| writeln!(out, "{r}"))?;
    } else {
        write!(out, "{report}")?;
    }
    let published = published_nulite_report(variant, reparameterized);
    if a.published {
        write!(out, "\n{published}")?;
    }
    if let Some(reference) = a.compare {
        let reference: Reference = reference.parse()?;
        write!(out, "\n{}", speedup_table(&reference_report(reference), &report)?)?;
        write!(out, "\n{}", speedup_table(&reference_report(reference), &published)?)?;
    }
    emit(&out)
}

fn overlay(a: OverlayArgs) -> Result<()> {
    let rgb = read_rgb(&a.image)?;
    let inst = InstanceMap::read_png(&a.instances)?;
    let nuclei = match &a.detections {
        Some(p) => read_detections(p)?,
        None => Vec::new(),
    };
    write_rgb(&a.output, &render_overlay(&rgb, &inst, &nuclei)?)?;
    println!("wrote {}", a.output.display());
    Ok(())
}
