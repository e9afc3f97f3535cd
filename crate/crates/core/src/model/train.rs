//! Mini-batch training loop.

use std::borrow::Borrow;

use log::debug;

use super::network::{backward, forward, Batch, ModelConfig, ParamSet};
use super::optim::{weighted_ce_loss, year_weight, AdamW, SwaAccumulator};
use super::ModelError;
use crate::augment::{augment, AugmentRanges};
use crate::preprocess::Composite;
use crate::store::{Label, Rng};

#[derive(Debug, Clone)]
pub struct Sample {
    pub composite: Composite,
    pub label: Label,
    pub years_to_diagnosis: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs are numbered from 1.
    pub epochs: usize,
    /// First epoch whose end-of-epoch weights enter the average.
    pub swa_start_epoch: usize,
    pub year_cap: f64,
    pub augmentation_enabled: bool,
    pub augment: AugmentRanges,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 4,
            epochs: 100,
            swa_start_epoch: 80,
            year_cap: 4.0,
            augmentation_enabled: true,
            augment: AugmentRanges::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 || self.swa_start_epoch >= self.epochs {
            return bad("swa_start_epoch must be below epochs");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.year_cap > 0.0) {
            return bad("year_cap must be positive");
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamSet,
    pub optimizer: AdamW,
    pub swa: SwaAccumulator,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, rng: &mut Rng) -> Self {
        let params = ParamSet::init(&cfg.model, rng);
        let optimizer = AdamW::new(&params, cfg.learning_rate, cfg.weight_decay);
        Self {
            params,
            optimizer,
            swa: SwaAccumulator::new(),
            epoch: 0,
        }
    }

    /// One pass over `samples` in a fresh random order. Returns the mean
    /// batch loss.
    pub fn run_epoch<S: Borrow<Sample>>(
        &mut self,
        cfg: &TrainConfig,
        samples: &[S],
        rng: &mut Rng,
    ) -> Result<f64, ModelError> {
        let order = rng.shuffled(&(0..samples.len()).collect::<Vec<_>>());
        let mut total = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<Composite> = chunk
                .iter()
                .map(|&i| {
                    let c = &samples[i].borrow().composite;
                    if cfg.augmentation_enabled {
                        augment(c, &cfg.augment, rng)
                    } else {
                        c.clone()
                    }
                })
                .collect();
            let refs: Vec<&Composite> = inputs.iter().collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].borrow().label.as_index()).collect();
            let weights = chunk
                .iter()
                .map(|&i| year_weight(samples[i].borrow().years_to_diagnosis, cfg.year_cap))
                .collect::<Result<Vec<_>, _>>()?;
            let batch = Batch::from_composites(&refs)?;
            let cache = forward(&self.params, &batch, true, rng)?;
            let (loss, d_logits) = weighted_ce_loss(&cache.logits, &labels, &weights)?;
            let (grads, _) = backward(&self.params, &cache, &d_logits);
            self.optimizer.step(&mut self.params, &grads)?;
            total += loss;
            n_batches += 1;
        }
        self.epoch += 1;
        if self.epoch >= cfg.swa_start_epoch {
            self.swa.update(&self.params)?;
        }
        if !self.params.is_finite() {
            return Err(ModelError::NonFinite(format!("parameters after epoch {}", self.epoch)));
        }
        Ok(total / n_batches.max(1) as f64)
    }
}

/// Trains from a fresh initialization and returns the SWA average.
pub fn train<S: Borrow<Sample>>(cfg: &TrainConfig, samples: &[S], rng: &mut Rng) -> Result<ParamSet, ModelError> {
    cfg.validate()?;
    let has = |l: Label| samples.iter().any(|s| s.borrow().label == l);
    if !has(Label::Ad) || !has(Label::Cn) {
        return Err(ModelError::MissingClass);
    }
    let mut state = TrainState::new(cfg, rng);
    for _ in 0..cfg.epochs {
        let loss = state.run_epoch(cfg, samples, rng)?;
        debug!("epoch {} loss {:.5}", state.epoch, loss);
    }
    state.swa.finalize()
}

impl TrainConfig {
    /// Training settings from a run configuration at learning rate `lr`.
    pub fn from_run(c: &crate::store::RunConfig, lr: f64) -> Self {
        Self {
            learning_rate: lr,
            weight_decay: c.weight_decay,
            batch_size: c.batch_size,
            epochs: c.epochs,
            swa_start_epoch: c.swa_start_epoch,
            year_cap: c.year_cap,
            augmentation_enabled: c.augmentation_enabled,
            augment: c.augment.clone(),
            model: ModelConfig {
                dropout: c.dropout,
                ..ModelConfig::default()
            },
        }
    }
}
