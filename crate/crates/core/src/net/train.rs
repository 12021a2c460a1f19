use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState};
use super::unet::loss_and_gradients;
use super::{UNetConfig, Weights};
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::synth::Tile;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_coeff: f64,
    /// Replaces the network's own dropout rate while training.
    pub dropout_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            l2_coeff: 1e-5,
            dropout_rate: 0.15,
            epochs: 30,
            batch_size: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        if !(self.l2_coeff >= 0.0 && self.l2_coeff.is_finite()) {
            return Err(Error::Validation(format!("l2 coefficient {} must be >= 0", self.l2_coeff)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Validation(format!(
                "dropout rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over the epoch's batches, measured with dropout active.
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// `None` when no validation tiles were given.
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_accuracy,val_loss,val_accuracy";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.epochs {
            s += &format!(
                "{},{},{},{},{}\n",
                r.epoch,
                r.train_loss,
                r.train_accuracy,
                opt(r.val_loss),
                opt(r.val_accuracy)
            );
        }
        s
    }
}

/// Mean loss and pixel accuracy in inference mode, without the L2 term.
pub fn evaluate_loss(weights: &Weights, config: &UNetConfig, tiles: &[Tile]) -> Result<(f64, f64)> {
    let (mut loss, mut correct, mut pixels) = (0.0, 0, 0);
    for t in tiles {
        let bg = loss_and_gradients(weights, config, &[&t.image.data], &[&t.mask.data], 0.0, None)?;
        loss += bg.loss * bg.pixels as f64;
        correct += bg.correct;
        pixels += bg.pixels;
    }
    let n = pixels.max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

pub fn train(
    weights: &Weights,
    config: &UNetConfig,
    train_set: &[Tile],
    val_set: &[Tile],
    tc: &TrainConfig,
) -> Result<(Weights, TrainReport)> {
    train_with(weights, config, train_set, val_set, tc, |_| {})
}

/// [`train`] with a callback after every epoch.
///
/// Each epoch visits the tiles in a fresh permutation drawn from
/// `(seed, epoch)` and takes `ceil(n / batch_size)` ADAM steps, the last one
/// on a partial batch when `n` is not a multiple of the batch size. The ADAM
/// moments start from zero on every call.
pub fn train_with(
    weights: &Weights,
    config: &UNetConfig,
    train_set: &[Tile],
    val_set: &[Tile],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Weights, TrainReport)> {
    tc.validate()?;
    let config = UNetConfig {
        dropout_rate: tc.dropout_rate,
        ..*config
    };
    config.validate()?;
    weights.check_layout(&config)?;
    if train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut w = weights.clone();
    let mut report = TrainReport::default();
    if tc.epochs == 0 {
        return Ok((w, report));
    }
    let mut state = AdamState::new(&w);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=tc.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, &[0, epoch as u64])));
        let (mut loss_sum, mut correct, mut pixels) = (0.0, 0, 0);
        for (step, batch) in order.chunks(tc.batch_size).enumerate() {
            let inputs: Vec<&[f32]> = batch.iter().map(|&i| train_set[i].image.data.as_slice()).collect();
            let targets: Vec<&[f32]> = batch.iter().map(|&i| train_set[i].mask.data.as_slice()).collect();
            let dropout_seed = mix_seed(tc.seed, &[1, epoch as u64, step as u64]);
            let bg = loss_and_gradients(&w, &config, &inputs, &targets, tc.l2_coeff, Some(dropout_seed))?;
            if !bg.loss.is_finite() {
                return Err(Error::NumericalAbort { epoch, step: step + 1 });
            }
            adam_step(&mut w, &bg.grads, &mut state, tc.learning_rate);
            if !w.all_finite() {
                return Err(Error::NumericalAbort { epoch, step: step + 1 });
            }
            loss_sum += bg.loss * bg.pixels as f64;
            correct += bg.correct;
            pixels += bg.pixels;
        }
        let (val_loss, val_accuracy) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_loss(&w, &config, val_set)?;
            (Some(l), Some(a))
        };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / pixels as f64,
            train_accuracy: correct as f64 / pixels as f64,
            val_loss,
            val_accuracy,
        };
        on_epoch(&rec);
        report.epochs.push(rec);
    }
    Ok((w, report))
}

/// Continues training every layer on a new set, from fresh optimizer state.
pub fn finetune(
    weights: &Weights,
    config: &UNetConfig,
    new_set: &[Tile],
    val_set: &[Tile],
    epochs: usize,
    tc: &TrainConfig,
) -> Result<(Weights, TrainReport)> {
    let tc = TrainConfig { epochs, ..*tc };
    train(weights, config, new_set, val_set, &tc)
}
