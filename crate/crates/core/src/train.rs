//! AdamW optimization of the set-prediction loss with step learning-rate
//! decay and bitwise-resumable checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::data::{make_batches, AugmentConfig, AugmentMode, Batch, VideoRecord};
use crate::error::{contract_err, Error, Result};
use crate::matching::{hungarian_loss, LossWeights};
use crate::model::ActivityGraphTransformer;
use crate::nn::{Mode, Param, Session};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    /// Step from which the learning rate is multiplied by `decay_factor`.
    pub decay_step: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps between evaluations and checkpoints; 0 disables them.
    pub eval_interval: usize,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    /// Temporal repetition factor of training augmentation.
    pub repeat: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            total_steps: 5000,
            decay_step: 3500,
            decay_factor: 0.1,
            batch_size: 4,
            seed: 0,
            eval_interval: 0,
            grad_clip: None,
            repeat: 4,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(contract_err!("learning_rate must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(contract_err!("weight_decay must be non-negative"));
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.repeat == 0 {
            return Err(contract_err!(
                "total_steps, batch_size and repeat must be at least 1"
            ));
        }
        if self.decay_step >= self.total_steps {
            return Err(contract_err!(
                "decay_step {} must be below total_steps {}",
                self.decay_step,
                self.total_steps
            ));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(contract_err!("decay_factor must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(contract_err!("grad_clip must be positive"));
            }
        }
        self.loss.validate()
    }

    /// Learning rate used by the update at zero-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.decay_step {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWState {
    pub fn new(params: &[Param]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW update. Weight decay is applied to the parameter directly and
/// only to kinds that decay (weights and biases).
pub fn adamw_step(
    params: &mut [Param],
    grads: &[Vec<f64>],
    state: &mut AdamWState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(contract_err!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.value.numel() {
            return Err(contract_err!(
                "gradient of `{}` has {} entries, expected {}",
                p.name,
                g.len(),
                p.value.numel()
            ));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in `{}` at index {i}; step rejected",
                p.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let decay = if p.kind.decays() {
            lr * weight_decay
        } else {
            0.0
        };
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            *w -= decay * *w;
            *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Rescales gradients in place so their global L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

// Stream tags keep the epoch-shuffle and dropout generators independent.
const EPOCH_STREAM: u64 = 1 << 40;
const DROPOUT_STREAM: u64 = 2 << 40;

fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub struct Trainer {
    pub model: ActivityGraphTransformer,
    pub optimizer: AdamWState,
    pub config: TrainConfig,
    pub history: Vec<StepRecord>,
    epoch_cache: Option<(usize, Vec<Batch>)>,
}

impl Trainer {
    pub fn new(model: ActivityGraphTransformer, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamWState::new(model.store().params());
        Ok(Self {
            model,
            optimizer,
            config,
            history: Vec::new(),
            epoch_cache: None,
        })
    }

    /// Updates applied so far.
    pub fn step(&self) -> usize {
        self.history.len()
    }

    pub fn check_records(&self, records: &[VideoRecord]) -> Result<()> {
        if records.is_empty() {
            return Err(contract_err!("training needs at least one video"));
        }
        let cfg = self.model.config();
        for r in records {
            r.validate()?;
            if r.features.cols() != cfg.input_dim {
                return Err(contract_err!(
                    "record {} has {} channels, model expects {}",
                    r.id,
                    r.features.cols(),
                    cfg.input_dim
                ));
            }
            if r.annotations.len() >= cfg.num_queries {
                return Err(contract_err!(
                    "record {} has {} instances; num_queries ({}) must exceed every video's count",
                    r.id,
                    r.annotations.len(),
                    cfg.num_queries
                ));
            }
            if let Some(a) = r.annotations.iter().find(|a| a.class >= cfg.num_classes) {
                return Err(contract_err!(
                    "record {} uses class {} outside 0..{}",
                    r.id,
                    a.class,
                    cfg.num_classes
                ));
            }
        }
        Ok(())
    }

    fn batch_for(&mut self, records: &[VideoRecord], step: usize) -> Result<Batch> {
        let per_epoch = records.len().div_ceil(self.config.batch_size);
        let (epoch, index) = (step / per_epoch, step % per_epoch);
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let augment = AugmentConfig {
                max_positions: self.model.config().max_positions,
                repeat: self.config.repeat,
                mode: AugmentMode::Train,
            };
            let mut rng = derived_rng(self.config.seed, EPOCH_STREAM + epoch as u64);
            self.epoch_cache = Some((
                epoch,
                make_batches(records, self.config.batch_size, &augment, &mut rng)?,
            ));
        }
        Ok(self.epoch_cache.as_ref().expect("epoch batches cached").1[index].clone())
    }

    /// Mean loss and gradients of one batch; running statistics are updated.
    pub fn batch_gradients(&mut self, batch: &Batch, step: usize) -> Result<(f64, Vec<Vec<f64>>)> {
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut grads: Vec<Vec<f64>> = self
            .model
            .store()
            .params()
            .iter()
            .map(|p| vec![0.0; p.value.numel()])
            .collect();
        let dropout = self.model.config().dropout > 0.0;
        for i in 0..batch.len() {
            let (loss, sample, updates) = {
                let mut s = Session::new(self.model.store(), Mode::Train, true);
                if dropout {
                    let stream = DROPOUT_STREAM + (step as u64) * 4096 + i as u64;
                    s = s.with_dropout_rng(derived_rng(self.config.seed, stream));
                }
                let out = self
                    .model
                    .forward(&mut s, &batch.features[i], &batch.masks[i])?;
                if !(s.tape.value(out.class_probs).is_finite()
                    && s.tape.value(out.segments).is_finite())
                {
                    return Err(Error::Numeric(format!(
                        "non-finite predictions on {} at step {step}",
                        batch.ids[i]
                    )));
                }
                let (loss, _) =
                    hungarian_loss(&mut s.tape, &batch.targets[i], out, &self.config.loss)?;
                let loss = s.tape.scale(loss, scale);
                s.tape.backward(loss)?;
                (
                    s.tape.value(loss).item(),
                    s.param_grads(),
                    s.take_stat_updates(),
                )
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss on {} at step {step}",
                    batch.ids[i]
                )));
            }
            total += loss;
            for (g, s) in grads.iter_mut().zip(sample) {
                g.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            }
            self.model.store_mut().apply_stat_updates(&updates);
        }
        Ok((total, grads))
    }

    /// Runs the next update and returns its record.
    pub fn train_step(&mut self, records: &[VideoRecord]) -> Result<StepRecord> {
        let step = self.step();
        let batch = self.batch_for(records, step)?;
        let (loss, mut grads) = self.batch_gradients(&batch, step)?;
        if let Some(max) = self.config.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        let lr = self.config.lr_at(step);
        adamw_step(
            self.model.store_mut().params_mut(),
            &grads,
            &mut self.optimizer,
            lr,
            self.config.weight_decay,
        )?;
        let record = StepRecord { step, lr, loss };
        self.history.push(record);
        Ok(record)
    }

    /// Trains until `total_steps`, calling `hook` after every update.
    pub fn run<F>(&mut self, records: &[VideoRecord], mut hook: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepRecord) -> Result<()>,
    {
        self.check_records(records)?;
        while self.step() < self.config.total_steps {
            let record = self.train_step(records)?;
            hook(self, &record)?;
        }
        Ok(())
    }

    /// Model checkpoint with optimizer moments and the loss history.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model);
        for (k, p) in self.model.store().params().iter().enumerate() {
            ckpt.push(
                ADAM_M,
                &p.name,
                Tensor::from_parts(p.value.shape().to_vec(), self.optimizer.m[k].clone()),
            );
            ckpt.push(
                ADAM_V,
                &p.name,
                Tensor::from_parts(p.value.shape().to_vec(), self.optimizer.v[k].clone()),
            );
        }
        if !self.history.is_empty() {
            let flat = self.history.iter().flat_map(|r| [r.lr, r.loss]).collect();
            ckpt.push(
                HISTORY,
                "lr_loss",
                Tensor::from_parts(vec![self.history.len(), 2], flat),
            );
        }
        ckpt.extra = serde_json::json!({
            "optimizer_step": self.optimizer.step,
            "train": self.config,
        });
        ckpt
    }

    /// Restores model, optimizer and history. `config` replaces the stored
    /// training config (allowing e.g. a longer schedule).
    pub fn from_checkpoint(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = ckpt.to_model()?;
        let mut trainer = Self::new(model, config)?;
        let missing = |name: &str| {
            Error::parse(
                None,
                format!("checkpoint lacks optimizer state for `{name}`"),
            )
        };
        for (k, p) in trainer.model.store().params().iter().enumerate() {
            trainer.optimizer.m[k] = ckpt
                .get(ADAM_M, &p.name)
                .ok_or_else(|| missing(&p.name))?
                .data()
                .to_vec();
            trainer.optimizer.v[k] = ckpt
                .get(ADAM_V, &p.name)
                .ok_or_else(|| missing(&p.name))?
                .data()
                .to_vec();
        }
        trainer.optimizer.step = ckpt
            .extra
            .get("optimizer_step")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::parse(None, "checkpoint lacks optimizer_step"))?;
        if let Some(h) = ckpt.get(HISTORY, "lr_loss") {
            trainer.history = (0..h.rows())
                .map(|i| StepRecord {
                    step: i,
                    lr: h.get2(i, 0),
                    loss: h.get2(i, 1),
                })
                .collect();
        }
        if trainer.history.len() as u64 != trainer.optimizer.step {
            return Err(Error::parse(
                None,
                "loss history length disagrees with optimizer step",
            ));
        }
        Ok(trainer)
    }
}

pub const ADAM_M: &str = "adam_m";
pub const ADAM_V: &str = "adam_v";
pub const HISTORY: &str = "history";
