//! Supervised training of the fast-forward U-Net on co-located patches cut
//! from early and late reconstruction snapshots.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{cast, Real, Tensor3};
use super::unet::{OperatorWeights, UNet, UNetConfig, WeightGrads};
use super::{complex_to_channels, rms_scale};
use crate::error::{Error, Result};
use crate::fields::{extract_patch, ComplexGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub input_iteration: usize,
    pub target_iteration: usize,
    /// Patches cut from each dataset (N).
    pub patches_per_dataset: usize,
    pub patch_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub lr_decay: f64,
    /// Fraction of datasets used for training; the rest validate.
    pub split_fraction: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            input_iteration: 5,
            target_iteration: 100,
            patches_per_dataset: 8,
            patch_size: 64,
            epochs: 40,
            batch_size: 4,
            lr: 1e-3,
            lr_step: 100,
            lr_decay: 0.2,
            split_fraction: 0.98,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    /// 512 px patches, 200 epochs.
    pub fn full_scale() -> Self {
        Self {
            patch_size: 512,
            epochs: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self, unet: &UNetConfig) -> Result<()> {
        if self.input_iteration >= self.target_iteration {
            return Err(Error::config("input_iteration must precede target_iteration"));
        }
        if self.patch_size == 0 || self.patch_size % unet.divisor() != 0 {
            return Err(Error::config(format!(
                "patch_size {} must be a positive multiple of {}",
                self.patch_size,
                unet.divisor()
            )));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::config("split_fraction must lie strictly between 0 and 1"));
        }
        if self.batch_size == 0 || self.patches_per_dataset == 0 || self.lr_step == 0 {
            return Err(Error::config("batch_size, patches_per_dataset and lr_step must be positive"));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("invalid training learning-rate schedule"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    /// Source dataset; the train/validation split never separates a dataset.
    pub dataset: usize,
    pub corner: (usize, usize),
    pub input: ComplexGrid,
    pub target: ComplexGrid,
}

/// Cuts `patches_per_dataset` co-located patches at seeded random corners.
pub fn make_training_pairs(
    snapshot_in: &ComplexGrid,
    snapshot_tgt: &ComplexGrid,
    cfg: &TrainConfig,
    rng_seed: u64,
) -> Result<Vec<TrainingPair>> {
    if snapshot_in.shape() != snapshot_tgt.shape() {
        return Err(Error::Shape {
            context: "training snapshots",
            expected: snapshot_in.shape(),
            actual: snapshot_tgt.shape(),
        });
    }
    let (h, w) = snapshot_in.shape();
    let p = cfg.patch_size;
    if h < p || w < p {
        return Err(Error::config(format!("snapshot {h}x{w} is smaller than patch size {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..cfg.patches_per_dataset)
        .map(|_| {
            let corner = (rng.random_range(0..=h - p), rng.random_range(0..=w - p));
            Ok(TrainingPair {
                dataset: 0,
                corner,
                input: extract_patch(snapshot_in, corner, (p, p))?,
                target: extract_patch(snapshot_tgt, corner, (p, p))?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss seen during the epoch (absent for epoch 0).
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: OperatorWeights,
    /// Epoch 0 (initialization) followed by one entry per epoch.
    pub log: Vec<EpochLog>,
    pub train_datasets: Vec<usize>,
    pub val_datasets: Vec<usize>,
    pub warnings: Vec<String>,
}

struct Sample<T> {
    input: Tensor3<T>,
    target: Tensor3<T>,
}

fn normalized_sample<T: Real>(pair: &TrainingPair) -> Sample<T> {
    let s = rms_scale(&pair.input);
    let mut input = pair.input.clone();
    let mut target = pair.target.clone();
    input.scale(1.0 / s);
    target.scale(1.0 / s);
    Sample {
        input: complex_to_channels(&input),
        target: complex_to_channels(&target),
    }
}

fn sample_loss<T: Real>(pred: &Tensor3<T>, target: &Tensor3<T>) -> f64 {
    let n = pred.data.len() as f64;
    pred.data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| {
            let d = (*p - *t).to_f64().unwrap();
            d * d
        })
        .sum::<f64>()
        / n
}

fn mean_loss<T: Real>(net: &UNet<T>, samples: &[Sample<T>]) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(&net.forward(&s.input)?, &s.target);
    }
    Ok(Some(total / samples.len() as f64))
}

struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Real> Adam<T> {
    fn new(like: &[Vec<T>]) -> Self {
        Self {
            m: like.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: like.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Vec<T>], grads: &WeightGrads<T>, lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (b1t, b2t): (T, T) = (cast(b1), cast(b2));
        let step: T = cast(lr / c1);
        let c2t: T = cast(c2);
        let epst: T = cast(eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1t * *mv + (T::one() - b1t) * gv;
                *vv = b2t * *vv + (T::one() - b2t) * gv * gv;
                *pv -= step * *mv / ((*vv / c2t).sqrt() + epst);
            }
        }
    }
}

/// Dataset-level shuffled split; at least one validation dataset whenever
/// two or more datasets exist.
fn split_datasets(pairs: &[TrainingPair], cfg: &TrainConfig, warnings: &mut Vec<String>) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = pairs.iter().map(|p| p.dataset).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x5EED_5917));
    let n = ids.len();
    let mut n_val = ((n as f64) * (1.0 - cfg.split_fraction)).round() as usize;
    if n < 2 {
        warnings.push("only one dataset available; training without validation".into());
        n_val = 0;
    } else if n_val == 0 {
        warnings.push(format!(
            "split {:.2} leaves no validation dataset out of {n}; holding out 1",
            cfg.split_fraction
        ));
        n_val = 1;
    } else if n_val >= n {
        n_val = n - 1;
    }
    let val = ids[..n_val].to_vec();
    let train = ids[n_val..].to_vec();
    (train, val)
}

/// Minimizes the patch MSE with Adam; both input and target are divided by
/// the input patch's RMS modulus, mirroring inference.
pub fn train_operator(pairs: &[TrainingPair], cfg: &TrainConfig, unet_cfg: &UNetConfig) -> Result<TrainOutcome> {
    train_operator_with(pairs, cfg, unet_cfg, |_| {})
}

pub fn train_operator_with(
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    unet_cfg: &UNetConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate(unet_cfg)?;
    let mut warnings = Vec::new();
    let (train_ids, val_ids) = split_datasets(pairs, cfg, &mut warnings);
    let train: Vec<Sample<f32>> = pairs
        .iter()
        .filter(|p| train_ids.contains(&p.dataset))
        .map(normalized_sample)
        .collect();
    let val: Vec<Sample<f32>> = pairs
        .iter()
        .filter(|p| val_ids.contains(&p.dataset))
        .map(normalized_sample)
        .collect();
    if train.is_empty() {
        return Err(Error::config("no training pairs left after the split"));
    }

    let init = OperatorWeights::init(unet_cfg, cfg.rng_seed)?;
    let mut net = UNet::<f32>::from_weights(&init)?;
    let mut adam = Adam::new(net.params());
    let first = EpochLog {
        epoch: 0,
        lr: cfg.lr,
        train_loss: None,
        val_loss: mean_loss(&net, &val)?,
    };
    on_epoch(&first);
    let mut log = vec![first];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.lr_decay.powi((epoch / cfg.lr_step) as i32);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = net.zero_grads();
            let per_sample = 1.0 / chunk.len() as f32;
            for &i in chunk {
                let s = &train[i];
                let (pred, cache) = net.forward_cached(&s.input)?;
                let loss = sample_loss(&pred, &s.target);
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        stage: "epoch",
                        index: epoch + 1,
                    });
                }
                epoch_loss += loss;
                let scale = 2.0 * per_sample / pred.data.len() as f32;
                let upstream = Tensor3::from_vec(
                    pred.c,
                    pred.h,
                    pred.w,
                    pred.data.iter().zip(&s.target.data).map(|(p, t)| scale * (p - t)).collect(),
                );
                net.backward(&cache, &upstream, &mut grads)?;
            }
            adam.step(net.params_mut(), &grads, lr);
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: Some(epoch_loss / train.len() as f64),
            val_loss: mean_loss(&net, &val)?,
        };
        if entry.val_loss.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                stage: "epoch",
                index: epoch + 1,
            });
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        weights: net.to_weights(),
        log,
        train_datasets: train_ids,
        val_datasets: val_ids,
        warnings,
    })
}
