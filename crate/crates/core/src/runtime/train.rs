use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use candle_core::Device;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, balanced_sampler, stack_batch, AnnotatedImage};
use crate::losses::{loss_total, TERM_NAMES};
use crate::network::Network;
use crate::{Error, Result};

use super::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta, OptimizerSnapshot};
use super::config::RunConfig;
use super::optim::{clip_grad_norm, AdamW, ExponentialLr};

/// One training-log line per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: String,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    /// Weighted loss terms by name.
    pub terms: BTreeMap<String, f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub kind: String,
    /// Zero-based index of the finished epoch.
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_terms: BTreeMap<String, f64>,
    pub seconds: f64,
}

/// Stateful single-writer training loop.
pub struct Trainer {
    config: RunConfig,
    network: Network,
    optimizer: AdamW,
    schedule: ExponentialLr,
    epoch: usize,
    global_step: u64,
    device: Device,
}

/// Random stream private to one epoch, so any epoch is reproducible on its own.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Draw index reserved for the sampler seed.
const SAMPLER_DRAW: u64 = u64::MAX / 4;

/// Seed of draw `index` within `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize, index: u64) -> u64 {
    let mut rng = epoch_rng(seed, epoch);
    rng.set_word_pos(2 * index as u128);
    rng.random()
}

impl Trainer {
    pub fn new(config: RunConfig, network: Network) -> Result<Self> {
        config.validate()?;
        if network.is_reparameterized() {
            return Err(Error::Config("cannot train a reparameterized network; train the branch form".into()));
        }
        let optimizer = AdamW::new(network.store().trainable(), config.train.optimizer())?;
        let schedule = ExponentialLr { base: config.train.lr, gamma: config.train.gamma };
        Ok(Self { config, network, optimizer, schedule, epoch: 0, global_step: 0, device: Device::Cpu })
    }

    /// Continues from a branch-form checkpoint with optimizer state.
    pub fn resume(config: RunConfig, checkpoint: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, checkpoint.network()?)?;
        checkpoint.restore_optimizer(&mut t.optimizer)?;
        t.epoch = checkpoint.meta.epoch;
        t.global_step = checkpoint.meta.global_step;
        Ok(t)
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn into_network(self) -> Network {
        self.network
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    /// Learning rate used by the next epoch.
    pub fn current_lr(&self) -> f64 {
        self.schedule.at_epoch(self.epoch)
    }

    /// Dataset-size draws for the next epoch: from the balanced sampler, or a
    /// shuffled pass when balancing is off.
    pub fn epoch_order(&self, dataset: &[AnnotatedImage]) -> Result<Vec<usize>> {
        if dataset.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let seed = epoch_seed(self.config.train.seed, self.epoch, SAMPLER_DRAW);
        if self.config.train.balanced_sampling {
            Ok(balanced_sampler(dataset, &self.config.data.sampler, seed)?.take(dataset.len()).collect())
        } else {
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            Ok(order)
        }
    }

    /// Runs one epoch, calling `log` after every step.
    pub fn train_epoch(
        &mut self,
        dataset: &[AnnotatedImage],
        log: &mut dyn FnMut(&StepRecord) -> Result<()>,
    ) -> Result<EpochSummary> {
        let start = Instant::now();
        let lr = self.current_lr();
        self.optimizer.set_learning_rate(lr);
        let order = self.epoch_order(dataset)?;
        let params = self.network.store().trainable();
        let (mut loss_sum, mut term_sums, mut steps) = (0.0, [0.0f64; 8], 0usize);
        for (b, chunk) in order.chunks(self.config.train.batch_size).enumerate() {
            let augmented: Vec<AnnotatedImage> = chunk
                .iter()
                .enumerate()
                .map(|(i, &idx)| {
                    let draw = (b * self.config.train.batch_size + i) as u64;
                    augment(&dataset[idx], &self.config.data.augment, epoch_seed(self.config.train.seed, self.epoch, draw))
                })
                .collect();
            let refs: Vec<&AnnotatedImage> = augmented.iter().collect();
            let (x, targets) = stack_batch(&refs, &self.config.data.normalization, &self.device)?;
            let out = self.network.forward_t(&x, true)?;
            let loss = loss_total(&out, &targets, &self.config.loss)?;
            let total = loss.total_value()?;
            if let Some(term) = loss.non_finite_term().or((!total.is_finite()).then_some("total")) {
                return Err(Error::NonFiniteLoss { term: term.to_string(), step: self.global_step as usize });
            }
            let mut grads = loss.total.backward()?;
            let grad_norm = clip_grad_norm(&mut grads, &params, self.config.train.grad_clip)?;
            self.optimizer.step(&grads)?;
            self.global_step += 1;
            steps += 1;
            loss_sum += total;
            let terms = loss.terms.as_array();
            for (s, t) in term_sums.iter_mut().zip(terms) {
                *s += t;
            }
            log(&StepRecord {
                kind: "step".into(),
                epoch: self.epoch,
                step: self.global_step,
                lr,
                total,
                terms: TERM_NAMES.iter().map(|n| n.to_string()).zip(terms).collect(),
                grad_norm,
            })?;
        }
        let n = steps as f64;
        let summary = EpochSummary {
            kind: "epoch".into(),
            epoch: self.epoch,
            lr,
            steps,
            mean_loss: loss_sum / n,
            mean_terms: TERM_NAMES.iter().map(|s| s.to_string()).zip(term_sums.map(|v| v / n)).collect(),
            seconds: start.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        Ok(summary)
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        let mut meta = CheckpointMeta::for_network(&self.network, self.config.data.normalization);
        meta.epoch = self.epoch;
        meta.global_step = self.global_step;
        meta.optimizer = Some(OptimizerSnapshot {
            config: *self.optimizer.config(),
            step: self.optimizer.step_count(),
            lr: self.optimizer.learning_rate(),
        });
        meta.run = Some(self.config.clone());
        meta
    }

    /// Branch-form weights plus optimizer state.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.network, &self.checkpoint_meta(), Some(&self.optimizer))
    }
}

/// Full run: `train_log.jsonl`, periodic `epoch_NNN.safetensors` and a final
/// `last.safetensors` in `out_dir`.
pub fn train(
    config: &RunConfig,
    dataset: &[AnnotatedImage],
    network: Network,
    out_dir: &Path,
) -> Result<(Network, Vec<EpochSummary>)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut trainer = Trainer::new(config.clone(), network)?;
    let mut summaries = Vec::new();
    while trainer.epoch() < config.train.epochs {
        let summary = trainer.train_epoch(dataset, &mut |rec| {
            serde_json::to_writer(&mut log, rec)?;
            writeln!(log).map_err(|e| Error::io(&log_path, e))
        })?;
        serde_json::to_writer(&mut log, &summary)?;
        writeln!(log).map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        log::info!("epoch {} lr {:.3e} loss {:.4} ({:.1}s)", summary.epoch, summary.lr, summary.mean_loss, summary.seconds);
        let every = config.train.checkpoint_every;
        if every > 0 && trainer.epoch() % every == 0 {
            trainer.save(&out_dir.join(format!("epoch_{:03}.safetensors", trainer.epoch())))?;
        }
        summaries.push(summary);
    }
    trainer.save(&out_dir.join("last.safetensors"))?;
    Ok((trainer.into_network(), summaries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_disks, AugmentConfig, SyntheticConfig};
    use crate::encoder::EncoderVariant;
    use crate::runtime::load_checkpoint;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.encoder.variant = EncoderVariant::T8;
        cfg.network.num_nuclei_classes = 3;
        cfg.network.num_tissue_classes = 2;
        cfg.train.epochs = 1;
        cfg.train.batch_size = 2;
        cfg.data.augment = AugmentConfig::none();
        cfg
    }

    fn tiny_data() -> Vec<AnnotatedImage> {
        synthetic_disks(2, &SyntheticConfig { size: 32, min_radius: 3.0, max_radius: 4.0, ..Default::default() }, 3)
    }

    #[test]
    fn epoch_seeds_are_stable_and_distinct() {
        assert_eq!(epoch_seed(1, 2, 3), epoch_seed(1, 2, 3));
        assert_ne!(epoch_seed(1, 2, 3), epoch_seed(1, 3, 3));
        assert_ne!(epoch_seed(1, 2, 3), epoch_seed(1, 2, 4));
    }

    #[test]
    fn same_seed_gives_bit_identical_checkpoints() {
        let cfg = tiny_config();
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let mut files = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("run{run}"));
            let net = Network::new(&cfg.network_config(), cfg.train.seed).unwrap();
            train(&cfg, &data, net, &out).unwrap();
            files.push(std::fs::read(out.join("last.safetensors")).unwrap());
            let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
            assert_eq!(log.lines().count(), 2);
            assert!(out.join("epoch_001.safetensors").exists());
        }
        assert_eq!(files[0], files[1]);
        let ck = load_checkpoint(&dir.path().join("run0/last.safetensors")).unwrap();
        assert_eq!(ck.meta.epoch, 1);
        assert_eq!(ck.meta.optimizer.as_ref().unwrap().step, 1);
        let resumed = Trainer::resume(cfg, &ck).unwrap();
        assert_eq!(resumed.epoch(), 1);
        assert!((resumed.current_lr() - 3e-4 * 0.85).abs() < 1e-15);
    }

    #[test]
    fn non_finite_loss_names_the_term() {
        let mut cfg = tiny_config();
        cfg.data.normalization.std = [0.0; 3];
        let net = Network::new(&cfg.network_config(), 0).unwrap();
        let mut t = Trainer::new(cfg, net).unwrap();
        let err = t.train_epoch(&tiny_data(), &mut |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err}");
    }

    #[test]
    fn fused_network_is_rejected() {
        let cfg = tiny_config();
        let net = Network::new(&cfg.network_config(), 0).unwrap();
        let x = candle_core::Tensor::zeros((1, 3, 32, 32), candle_core::DType::F32, &Device::Cpu).unwrap();
        net.forward_t(&x, true).unwrap();
        assert!(Trainer::new(cfg, net.reparameterize().unwrap()).is_err());
    }
}
