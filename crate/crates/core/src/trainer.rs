//! Round / epoch / batch orchestration with Nesterov SGD.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{augment, AugmentPolicy};
use crate::encoder::{
    encode_backward_into, encode_forward, init_encoder, EncoderParams, EncoderShape, ForwardCache,
    Tensors,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{aug_loss, and_loss, total_loss, ue_loss, zero_term, BatchMembership, LossBundle};
use crate::memory_bank::MemoryBank;
use crate::neighborhood::{round_ratio, NeighborhoodState};
use crate::rng::{self, Rng, RngState, Stream};

/// Every hyperparameter of a run. Defaults are the full-scale protocol;
/// desk-scale runs override them through the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    /// First epoch (within a round) at which the decayed rate applies.
    pub lr_decay_start: usize,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub eta: f64,
    pub tau: f64,
    pub k: usize,
    pub ue_weight_step: f64,
    pub ue_weight_every: usize,
    pub use_aug_loss: bool,
    pub loss_reduction: Reduction,
    /// When false the identity policy replaces `policy`.
    pub augment: bool,
    pub policy: AugmentPolicy,
    pub hidden: usize,
    pub embed_dim: usize,
    pub seed: u64,
    /// Extra checkpoint boundary every this many epochs; 0 means round ends only.
    pub checkpoint_every: usize,
    pub data: DataConfig,
}

/// How per-instance losses combine into the batch objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Divide the batch sum by the batch size.
    Mean,
    Sum,
}

impl std::str::FromStr for Reduction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(format!("expected mean or sum, got {other:?}")),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        })
    }
}

/// Dataset selection for command-line runs.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_image_size: usize,
    pub synthetic_noise: f64,
    pub synthetic_seed: u64,
    /// Instances per class held out for evaluation of synthetic data.
    pub holdout_per_class: usize,
    /// Keep only the first `limit` training instances; 0 keeps all.
    pub limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic_classes: 3,
            synthetic_per_class: 150,
            synthetic_image_size: 12,
            synthetic_noise: 0.15,
            synthetic_seed: 1,
            holdout_per_class: 30,
            limit: 0,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 5,
            epochs_per_round: 200,
            batch_size: 128,
            base_lr: 0.03,
            lr_decay: 0.1,
            lr_decay_start: 80,
            lr_decay_every: 40,
            momentum: 0.9,
            eta: 0.5,
            tau: 0.07,
            k: 1,
            ue_weight_step: 0.2,
            ue_weight_every: 80,
            use_aug_loss: true,
            loss_reduction: Reduction::Mean,
            augment: true,
            policy: AugmentPolicy::default(),
            hidden: 128,
            embed_dim: 128,
            seed: 0,
            checkpoint_every: 0,
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rounds", self.rounds),
            ("epochs_per_round", self.epochs_per_round),
            ("batch_size", self.batch_size),
            ("lr_decay_every", self.lr_decay_every),
            ("ue_weight_every", self.ue_weight_every),
            ("k", self.k),
            ("hidden", self.hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2".into()));
        }
        if !(self.base_lr > 0.0) || !(self.lr_decay > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config("base_lr, lr_decay and tau must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config("eta must lie in (0, 1]".into()));
        }
        if !(self.ue_weight_step >= 0.0) {
            return Err(Error::Config("ue_weight_step must be non-negative".into()));
        }
        self.policy
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn effective_policy(&self) -> AugmentPolicy {
        if self.augment {
            self.policy
        } else {
            AugmentPolicy::identity()
        }
    }
}

/// Drops binary noise from repeated decay so 0.03 * 0.1^3 is exactly 3e-5.
fn round_significant(x: f64) -> f64 {
    format!("{x:.14e}").parse().unwrap_or(x)
}

/// Learning rate and UE-loss weight at a 0-based epoch within a round.
///
/// The rate stays at `base_lr` until `lr_decay_start`, then is multiplied by
/// `lr_decay` at the start of every `lr_decay_every`-epoch block. The weight
/// grows by `ue_weight_step` every `ue_weight_every` epochs, starting at 0.
pub fn schedules(epoch_in_round: usize, cfg: &TrainConfig) -> (f64, f64) {
    let lr = if epoch_in_round < cfg.lr_decay_start {
        cfg.base_lr
    } else {
        let blocks = (epoch_in_round - cfg.lr_decay_start) / cfg.lr_decay_every + 1;
        round_significant(cfg.base_lr * cfg.lr_decay.powi(blocks as i32))
    };
    let w = cfg.ue_weight_step * (epoch_in_round / cfg.ue_weight_every) as f64;
    (lr, w)
}

/// Momentum buffers, one per encoder scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: Tensors,
}

impl OptimizerState {
    pub fn new(shape: &EncoderShape) -> Self {
        OptimizerState {
            momentum: Tensors::zeros(shape),
        }
    }
}

/// `buf <- mu buf + g;  p <- p - lr (g + mu buf)`.
pub fn nesterov_update(param: &mut [f64], grad: &[f64], buf: &mut [f64], lr: f64, mu: f64) -> Result<()> {
    if param.len() != grad.len() || param.len() != buf.len() {
        return Err(Error::param(format!(
            "optimizer shapes differ: {} params, {} grads, {} buffers",
            param.len(),
            grad.len(),
            buf.len()
        )));
    }
    for ((p, g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
        *b = mu * *b + g;
        *p -= lr * (g + mu * *b);
    }
    Ok(())
}

pub fn nesterov_step(
    params: &mut EncoderParams,
    grads: &Tensors,
    state: &mut OptimizerState,
    lr: f64,
    mu: f64,
) -> Result<()> {
    if !params.weights.same_layout(grads) || !params.weights.same_layout(&state.momentum) {
        return Err(Error::param("gradient or momentum layout differs from the parameters"));
    }
    for ((p, g), b) in params
        .weights
        .slices_mut()
        .into_iter()
        .zip(grads.slices())
        .zip(state.momentum.slices_mut())
    {
        nesterov_update(p, g, b, lr, mu)?;
    }
    params.touch();
    Ok(())
}

/// Per-epoch metrics; loss values are averaged over the epoch's instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub round: usize,
    pub l_and: f64,
    pub l_ue: f64,
    pub l_aug: f64,
    pub l_total: f64,
    pub lr: f64,
    pub w: f64,
}

/// Everything needed to continue a run from an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: EncoderParams,
    pub optimizer: OptimizerState,
    pub bank: MemoryBank,
    /// Present while a round is in progress.
    pub neighborhood: Option<NeighborhoodState>,
    /// 1-based round to run next; `rounds + 1` once training is complete.
    pub round: usize,
    /// 0-based epoch within `round` to run next.
    pub epoch: usize,
    pub shuffle_rng: RngState,
    pub augment_rng: RngState,
}

impl TrainState {
    pub fn new(config: TrainConfig, n: usize, image_shape: (usize, usize, usize)) -> Result<Self> {
        config.validate()?;
        let (height, width, channels) = image_shape;
        let shape = EncoderShape {
            height,
            width,
            channels,
            hidden: config.hidden,
            embed_dim: config.embed_dim,
        };
        let params = init_encoder(shape, config.seed)?;
        let bank = MemoryBank::init(n, config.embed_dim, config.seed)?;
        Ok(TrainState {
            optimizer: OptimizerState::new(&shape),
            params,
            bank,
            neighborhood: None,
            round: 1,
            epoch: 0,
            shuffle_rng: RngState::capture(&rng::stream(config.seed, Stream::Shuffle)),
            augment_rng: RngState::capture(&rng::stream(config.seed, Stream::Augment)),
            config,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.round > self.config.rounds
    }

    /// Rounds all persistent state through f32, which is what a checkpoint
    /// stores; continuing from memory or from disk is then identical.
    fn quantize(&mut self) {
        self.params.weights.quantize();
        self.optimizer.momentum.quantize();
        self.bank.quantize();
        if let Some(nb) = &mut self.neighborhood {
            nb.quantize();
        }
    }
}

/// Callbacks raised while training.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    /// Neighbors and entropies were recomputed for a new round.
    RoundStart { round: usize, ratio: f64 },
    Epoch(&'a EpochRecord),
    /// An epoch boundary at which state may be persisted.
    Checkpoint(&'a TrainState),
}

pub struct Trainer<'a> {
    state: TrainState,
    images: &'a [Image],
}

struct BatchOutcome {
    bundle: LossBundle,
}

impl<'a> Trainer<'a> {
    pub fn new(images: &'a [Image], config: TrainConfig) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::param("training set is empty"))?;
        if config.batch_size > images.len() {
            return Err(Error::Config(format!(
                "batch_size {} exceeds dataset size {}",
                config.batch_size,
                images.len()
            )));
        }
        if config.k >= images.len() {
            return Err(Error::Config(format!(
                "k = {} needs at least {} instances",
                config.k,
                config.k + 1
            )));
        }
        let state = TrainState::new(config, images.len(), (first.height, first.width, first.channels))?;
        Ok(Trainer { state, images })
    }

    /// Continues from a saved state; `images` must be the same training set.
    pub fn resume(images: &'a [Image], state: TrainState) -> Result<Self> {
        state.config.validate()?;
        if state.bank.len() != images.len() {
            return Err(Error::State(format!(
                "checkpoint memory has {} rows but the dataset has {} images",
                state.bank.len(),
                images.len()
            )));
        }
        let s = &state.params.shape;
        if images
            .iter()
            .any(|im| im.height != s.height || im.width != s.width || im.channels != s.channels)
        {
            return Err(Error::State("dataset images do not match the checkpoint encoder".into()));
        }
        Ok(Trainer { state, images })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// Runs to completion, reporting progress through `on_event`.
    pub fn run<F>(&mut self, mut on_event: F) -> Result<Vec<EpochRecord>>
    where
        F: FnMut(TrainEvent<'_>) -> Result<()>,
    {
        let mut log = Vec::new();
        let mut shuffle_rng = self.state.shuffle_rng.restore();
        let mut augment_rng = self.state.augment_rng.restore();
        let cfg = self.state.config.clone();
        while !self.state.is_finished() {
            if self.state.neighborhood.is_none() {
                let ratio = round_ratio(self.state.round, cfg.rounds)?;
                self.state.neighborhood = Some(NeighborhoodState::build(
                    &self.state.bank,
                    cfg.k,
                    cfg.tau,
                    ratio,
                    self.state.round,
                )?);
                on_event(TrainEvent::RoundStart {
                    round: self.state.round,
                    ratio,
                })?;
            }
            let record = self.run_epoch(&mut shuffle_rng, &mut augment_rng)?;
            on_event(TrainEvent::Epoch(&record))?;
            log.push(record);

            self.state.epoch += 1;
            let round_done = self.state.epoch == cfg.epochs_per_round;
            if round_done {
                self.state.round += 1;
                self.state.epoch = 0;
                self.state.neighborhood = None;
            }
            let periodic = cfg.checkpoint_every > 0 && self.state.epoch.is_multiple_of(cfg.checkpoint_every);
            if round_done || periodic {
                self.state.quantize();
                self.state.shuffle_rng = RngState::capture(&shuffle_rng);
                self.state.augment_rng = RngState::capture(&augment_rng);
                on_event(TrainEvent::Checkpoint(&self.state))?;
            }
        }
        self.state.shuffle_rng = RngState::capture(&shuffle_rng);
        self.state.augment_rng = RngState::capture(&augment_rng);
        Ok(log)
    }

    fn run_epoch(&mut self, shuffle_rng: &mut Rng, augment_rng: &mut Rng) -> Result<EpochRecord> {
        let cfg = &self.state.config;
        let (lr, w) = schedules(self.state.epoch, cfg);
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        order.shuffle(shuffle_rng);
        let (mut s_and, mut s_ue, mut s_aug, mut s_total) = (0.0, 0.0, 0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let out = self.train_batch(batch, lr, w, augment_rng).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "round {} epoch {} batch {b}: {msg}",
                    self.state.round, self.state.epoch
                )),
                other => other,
            })?;
            s_and += out.bundle.and_value;
            s_ue += out.bundle.ue_value;
            s_aug += out.bundle.aug_value;
            s_total += out.bundle.total_value;
        }
        let n = self.images.len() as f64;
        Ok(EpochRecord {
            epoch: self.state.epoch,
            round: self.state.round,
            l_and: s_and / n,
            l_ue: s_ue / n,
            l_aug: s_aug / n,
            l_total: s_total / n,
            lr,
            w,
        })
    }

    fn train_batch(&mut self, batch: &[usize], lr: f64, w: f64, augment_rng: &mut Rng) -> Result<BatchOutcome> {
        let cfg = self.state.config.clone();
        let policy = cfg.effective_policy();
        let images = self.images;

        let originals: Vec<&Image> = batch.iter().map(|&i| &images[i]).collect();
        let augmented: Vec<Image> = if cfg.use_aug_loss {
            originals
                .iter()
                .map(|im| augment(im, augment_rng, &policy))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        let params = &self.state.params;
        let forward = |ims: Vec<&Image>| -> Result<(Vec<Vec<f64>>, Vec<ForwardCache>)> {
            let outs: Vec<(Vec<f64>, ForwardCache)> = ims
                .par_iter()
                .map(|im| encode_forward(params, im))
                .collect::<Result<_>>()?;
            Ok(outs.into_iter().unzip())
        };
        let (v, v_cache) = forward(originals)?;
        let (v_hat, v_hat_cache) = forward(augmented.iter().collect())?;

        let bank = &self.state.bank;
        let nb = self
            .state
            .neighborhood
            .as_ref()
            .ok_or_else(|| Error::State("no neighborhood state for the current round".into()))?;
        let membership = BatchMembership::from_state(nb, batch);
        let and = and_loss(bank, &v, batch, &membership, cfg.tau)?;
        let ue = ue_loss(bank, &v, batch, cfg.tau)?;
        let aug = if cfg.use_aug_loss {
            aug_loss(bank, &v, &v_hat, cfg.tau)?
        } else {
            zero_term(batch.len(), bank.dim())
        };
        let bundle = total_loss(&and, &ue, &aug, w)?;
        if !bundle.total_value.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is not finite (and {}, ue {}, aug {})",
                bundle.and_value, bundle.ue_value, bundle.aug_value
            )));
        }

        let mut grads = Tensors::zeros(&params.shape);
        for (cache, g) in v_cache.iter().zip(&bundle.grad_v) {
            encode_backward_into(params, cache, g, &mut grads)?;
        }
        for (cache, g) in v_hat_cache.iter().zip(&bundle.grad_v_hat) {
            encode_backward_into(params, cache, g, &mut grads)?;
        }
        if cfg.loss_reduction == Reduction::Mean {
            let scale = 1.0 / batch.len() as f64;
            for s in grads.slices_mut() {
                s.iter_mut().for_each(|g| *g *= scale);
            }
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("parameter gradient is not finite".into()));
        }
        nesterov_step(&mut self.state.params, &grads, &mut self.state.optimizer, lr, cfg.momentum)?;
        for (&i, vi) in batch.iter().zip(&v) {
            self.state.bank.ema_update(i, vi, cfg.eta)?;
        }
        Ok(BatchOutcome { bundle })
    }
}

/// Result of a complete run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub bank: MemoryBank,
    pub log: Vec<EpochRecord>,
    pub round_starts: usize,
}

/// Trains from scratch on `images` and returns the final model and log.
pub fn train(images: &[Image], config: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(images, config)?;
    let mut round_starts = 0;
    let log = trainer.run(|ev| {
        if let TrainEvent::RoundStart { .. } = ev {
            round_starts += 1;
        }
        Ok(())
    })?;
    let state = trainer.into_state();
    Ok(TrainOutcome {
        params: state.params,
        bank: state.bank,
        log,
        round_starts,
    })
}
