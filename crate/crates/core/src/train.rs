//! The training loop shared by pretraining and fine-tuning.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ItemInput, Model};
use crate::optim::{lr_at, Adam};
use crate::params::{param_grads, Ctx, GradGroups, Group, ParamStore};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Prompts, adapters, mapper, projector and temporal embeddings.
    All,
    /// Visual and text prompts only.
    Prompts,
}

impl Regime {
    pub fn grad_groups(self) -> GradGroups {
        match self {
            Regime::All => GradGroups::TRAINABLE,
            Regime::Prompts => GradGroups::PROMPTS,
        }
    }
}

/// Base LR for caption pretraining; [`TrainConfig::default`] holds the fine-tuning value.
pub const PRETRAIN_BASE_LR: f64 = 2e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub prompt_lr: f64,
    pub warmup_frac: f64,
    pub mask_prob: f64,
    pub seed: u64,
    /// Caps the total number of optimizer steps; 0 means no cap.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 8,
            base_lr: 3e-5,
            prompt_lr: 1e-3,
            warmup_frac: 0.1,
            mask_prob: 0.15,
            seed: 0,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.prompt_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, items: usize) -> usize {
        let per_epoch = items.div_ceil(self.batch_size);
        let total = self.epochs * per_epoch;
        if self.max_steps > 0 { total.min(self.max_steps) } else { total }
    }
}

/// A model input with `(text position, label)` targets.
pub type Labeled = (ItemInput, Vec<(usize, usize)>);

/// One line of the step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub prompt_lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub first_loss: f64,
    pub last_loss: f64,
    pub tokens_per_sec: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub regime: Regime,
    pub adam: Adam,
    pub step: usize,
    pub total_steps: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, regime: Regime, total_steps: usize) -> Result<Self> {
        config.validate()?;
        Ok(Trainer { config, regime, adam: Adam::new(), step: 0, total_steps })
    }

    pub fn finished(&self) -> bool {
        self.step >= self.total_steps
    }

    /// One seeded pass over `data` in shuffled batches. Each step appends a
    /// JSON line to `log`. Labels index `rows` when given.
    pub fn train_epoch(
        &mut self,
        model: &mut Model,
        data: &[Labeled],
        rows: Option<&[usize]>,
        epoch: usize,
        mut log: Option<&mut dyn Write>,
    ) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Input("no training items".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let started = Instant::now();
        let mut losses = Vec::new();
        let mut tokens = 0usize;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            if self.finished() {
                break;
            }
            let batch: Vec<Labeled> = chunk.iter().map(|&i| data[i].clone()).collect();
            tokens += batch.iter().map(|(item, _)| item.ids.len()).sum::<usize>();
            let loss = self.step(model, &batch, rows, b)?;
            losses.push(loss);
            if let Some(w) = log.as_deref_mut() {
                let record = StepRecord {
                    step: self.step,
                    epoch,
                    lr: lr_at(self.step, self.total_steps, self.config.base_lr, self.config.warmup_frac),
                    prompt_lr: lr_at(self.step, self.total_steps, self.config.prompt_lr, self.config.warmup_frac),
                    loss,
                };
                serde_json::to_writer(&mut *w, &record)?;
                writeln!(w).map_err(|e| Error::io("<step log>", e))?;
            }
        }
        let n = losses.len().max(1) as f64;
        Ok(EpochMetrics {
            epoch,
            steps: losses.len(),
            mean_loss: losses.iter().sum::<f64>() / n,
            first_loss: losses.first().copied().unwrap_or(f64::NAN),
            last_loss: losses.last().copied().unwrap_or(f64::NAN),
            tokens_per_sec: tokens as f64 / started.elapsed().as_secs_f64().max(1e-9),
        })
    }

    /// Forward, backward and one Adam update; returns the batch loss.
    fn step(&mut self, model: &mut Model, batch: &[Labeled], rows: Option<&[usize]>, index: usize) -> Result<f64> {
        let dropout_seed = self.config.seed.wrapping_mul(31).wrapping_add(self.step as u64);
        let mut tape = Tape::new();
        let mut cx = Ctx::train(&mut tape, &model.store, self.regime.grad_groups(), dropout_seed);
        let loss = model.batch_loss(&mut cx, batch, rows, model.config.dropout)?;
        let bindings = cx.bindings();
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { step: self.step, batch: index, loss: value });
        }
        let grads = param_grads(&bindings, &tape.backward(loss)?);
        self.step += 1;
        let (s, total, warm) = (self.step, self.total_steps, self.config.warmup_frac);
        let (base, prompt) = (self.config.base_lr, self.config.prompt_lr);
        let regime = self.regime;
        self.adam.step(&mut model.store, &grads, |g| match (g, regime) {
            (Group::Prompt, _) => lr_at(s, total, prompt, warm),
            (Group::Rest, Regime::All) => lr_at(s, total, base, warm),
            _ => 0.0,
        });
        Ok(value)
    }
}

/// SHA-256 over the names, shapes and values of every parameter in `group`.
pub fn group_hash(store: &ParamStore, group: Group) -> String {
    let mut h = Sha256::new();
    for (_, p) in store.iter().filter(|(_, p)| p.group == group) {
        h.update((p.name.len() as u64).to_le_bytes());
        h.update(p.name.as_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
