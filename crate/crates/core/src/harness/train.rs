//! Training loop: augment, forward, masked loss, backward, SGD.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{lr_schedule, TrainConfig};
use crate::data::{augment_sample, SceneSample};
use crate::error::{Error, Result};
use crate::loss::{total_loss, ValidMask};
use crate::model::DepthModel;
use crate::nn::Ctx;
use crate::tensor::Sgd;

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Augmentation seed for one sample in one epoch. It does not depend on the
/// fusion mode, so every mode sees the same draws.
pub fn augment_seed(seed: u64, sample: usize, epoch: usize) -> u64 {
    mix(mix(mix(seed) ^ sample as u64) ^ (epoch as u64).rotate_left(32))
}

/// Sample order for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0xA5A5_A5A5) ^ epoch as u64);
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Samples left out because their lidar mask was empty.
    pub skipped_samples: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub const LOG_HEADER: &'static str = "step,lr,loss";

    pub fn log_csv(&self) -> String {
        let mut s = format!("{}\n", Self::LOG_HEADER);
        for l in &self.steps {
            writeln!(s, "{},{:e},{:.6}", l.step, l.lr, l.loss).unwrap();
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            writeln!(s, "{},{:.6}", i + 1, l).unwrap();
        }
        s
    }

    /// Last epoch's mean loss over the first epoch's.
    pub fn loss_ratio(&self) -> Option<f64> {
        Some(self.epoch_losses.last()? / self.epoch_losses.first()?)
    }
}

/// Called after every epoch with `(epoch, mean_loss)`.
pub type Progress<'a> = &'a mut dyn FnMut(usize, f64);

/// Trains a fresh model. With `out`, writes `train_log.csv`, `epochs.csv`,
/// `config.txt`, periodic `epoch_%03d/` checkpoints and `final/`.
pub fn train(
    cfg: &TrainConfig,
    data: &[SceneSample],
    out: Option<&Path>,
    progress: Option<Progress<'_>>,
) -> Result<(DepthModel, TrainReport)> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    let mut model = DepthModel::<f32>::new(&model_cfg, cfg.seed)?;
    let (h, w) = model_cfg.input();
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(s) = data.iter().find(|s| s.size() != (h, w) || s.radar.shape()[2] != model_cfg.radar_channels) {
        return Err(Error::Config(format!(
            "sample {:?} with {} radar channels does not match model input {h}x{w} with {}",
            s.size(),
            s.radar.shape()[2],
            model_cfg.radar_channels
        )));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        cfg.to_kv().write(&dir.join("config.txt"))?;
    }

    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let max_steps = cfg.epochs * steps_per_epoch;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut report = TrainReport::default();
    let mut progress = progress;
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, data.len());
        let (mut epoch_sum, mut epoch_n) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let lr = lr_schedule(step, max_steps, cfg.lr0, cfg.lr_power)?;
            let mut batch_losses = Vec::with_capacity(batch.len());
            let mut grads = Vec::with_capacity(batch.len());
            for &idx in batch {
                let mut rng = ChaCha8Rng::seed_from_u64(augment_seed(cfg.seed, idx, epoch));
                let s = augment_sample(&data[idx], &mut rng);
                let mask = ValidMask::from_target(&s.lidar)?;
                if mask.is_empty() {
                    report.skipped_samples += 1;
                    continue;
                }
                let nan = Error::NanLoss { step, epoch: epoch + 1 };
                // debug builds flag the first non-finite op; report it as the step's loss
                let at_step = |e: Error| match e {
                    Error::NonFinite { .. } => Error::NanLoss { step, epoch: epoch + 1 },
                    e => e,
                };
                let mut ctx = Ctx::new(&model.params);
                let y = model.forward(&mut ctx, &s.image, &s.radar).map_err(at_step)?;
                let loss = total_loss(&mut ctx.tape, y, &s.lidar, &s.image, &mask, cfg.loss).map_err(at_step)?;
                let value = ctx.value(loss).item()? as f64;
                if !value.is_finite() {
                    return Err(nan);
                }
                batch_losses.push(value);
                grads.push(ctx.backward(loss)?);
            }
            if !grads.is_empty() {
                // mean over the batch, summed in sample order
                let inv = 1.0 / grads.len() as f32;
                for g in &grads {
                    let scaled: Vec<_> = g
                        .iter()
                        .map(|t| crate::tensor::Tensor::from_fn(t.shape(), |i| t.data()[i] * inv))
                        .collect();
                    model.params.accumulate_grads(&scaled)?;
                }
                let names = model.params.names().to_vec();
                sgd.step_named(model.params.tensors_mut(), lr, |i| names[i].clone())?;
                let mean = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
                epoch_sum += batch_losses.iter().sum::<f64>();
                epoch_n += batch_losses.len();
                report.steps.push(StepLog { step, lr, loss: mean });
            }
            step += 1;
        }
        let mean = if epoch_n == 0 { f64::NAN } else { epoch_sum / epoch_n as f64 };
        report.epoch_losses.push(mean);
        if let Some(p) = progress.as_mut() {
            p(epoch + 1, mean);
        }
        if let Some(dir) = out {
            let e = epoch + 1;
            if cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0 && e < cfg.epochs {
                let ck = dir.join(format!("epoch_{e:03}"));
                model.save(&ck)?;
                report.checkpoints.push(ck);
            }
        }
    }

    if let Some(dir) = out {
        let ck = dir.join("final");
        model.save(&ck)?;
        report.checkpoints.push(ck);
        let log = dir.join("train_log.csv");
        fs::write(&log, report.log_csv()).map_err(|e| Error::io(&log, e))?;
        let ep = dir.join("epochs.csv");
        fs::write(&ep, report.epochs_csv()).map_err(|e| Error::io(&ep, e))?;
    }
    Ok((model, report))
}
