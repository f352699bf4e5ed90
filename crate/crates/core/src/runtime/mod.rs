//! Training, checkpointing, tiled inference, run configuration and output
//! writers.

mod checkpoint;
mod config;
mod evaluate;
mod optim;
mod output;
mod tiling;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, OptimizerSnapshot};
pub use config::{DataConfig, EncoderSection, EvalConfig, NetworkSection, RunConfig, SyntheticSource, TrainConfig};
pub use evaluate::{evaluate_dirs, evaluate_pairs, load_prediction, PredictionSource};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, ExponentialLr};
pub use output::{class_palette, list_images, render_overlay, write_outputs, OutputPaths};
pub use tiling::{infer_direct, infer_tiled, plan_tiles, predict_maps, stitch, TileGrid, TilePrediction};
pub use train::{epoch_seed, train, EpochSummary, StepRecord, Trainer};
