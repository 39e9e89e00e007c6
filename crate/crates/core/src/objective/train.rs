//! End-to-end training with Adam under the bundle's freeze flags.

use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::model::{checkpoint, ModelBundle};
use crate::objective::batch::{evaluate_batch, prepare, PreparedExample, TrainExample};
use crate::rng::rng_for;
use crate::sample::{validate_sample, LossWeights};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay to zero at the final step.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Write a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: usize,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub clip_grad_norm: Option<f64>,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            checkpoint_every: 0,
            max_steps: None,
            clip_grad_norm: None,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs < 1 {
            return fail("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be > 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("beta1 and beta2 must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return fail("adam_eps must be > 0");
        }
        if let Some(c) = self.clip_grad_norm {
            if c <= 0.0 {
                return fail("clip_grad_norm must be > 0");
            }
        }
        self.weights.validate().map_err(TrainError::Config)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl Adam {
    pub fn new(bundle: &ModelBundle) -> Self {
        let zeros = || {
            bundle
                .params()
                .iter()
                .map(|p| Mat::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    /// One update of every trainable parameter; frozen ones are not touched.
    pub fn step(&mut self, bundle: &mut ModelBundle, grads: &[Mat], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            if !bundle.is_trainable(i) {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = bundle.params_mut()[i].value.data_mut();
            for (k, &g) in grads[i].data().iter().enumerate() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub l_txt: f64,
    pub l_loc: f64,
    pub l_total: f64,
}

pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: Vec<LogRow>,
    pub final_checkpoint: Option<PathBuf>,
}

fn clip(grads: &mut [Mat], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
}

fn save_checkpoint(bundle: &ModelBundle, dir: &Path, name: &str) -> Result<PathBuf, TrainError> {
    let path = dir.join(name);
    checkpoint::save(bundle, &path)?;
    Ok(path)
}

/// Trains `bundle` on `dataset`. With `out_dir`, streams the CSV log to
/// `train_log.csv`, writes `step_<n>.ckpt` at the configured cadence and
/// `final.ckpt` at the end.
pub fn train(
    mut bundle: ModelBundle,
    dataset: &[TrainExample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for (index, ex) in dataset.iter().enumerate() {
        if let Some(v) = validate_sample(&ex.sample).first() {
            return Err(TrainError::InvalidSample {
                index,
                reason: v.to_string(),
            });
        }
    }
    let prepared = prepare(dataset, bundle.vocab())?;

    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(csv::Writer::from_path(dir.join("train_log.csv"))?)
        }
        None => None,
    };

    let per_epoch = config.steps_per_epoch(prepared.len());
    let planned = per_epoch * config.epochs;
    let total_steps = config.max_steps.map_or(planned, |m| m.min(planned));
    let mut adam = Adam::new(&bundle);
    let mut log = Vec::with_capacity(total_steps);
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut step = 0;

    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng_for(config.seed, &format!("epoch-order-{epoch}")));
        for chunk in order.chunks(config.batch_size) {
            if step >= total_steps {
                break 'epochs;
            }
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &prepared[i]).collect();
            let eval = evaluate_batch(&bundle, &batch, &config.weights, true)?;
            let b = eval.breakdown;
            let mut grads = eval.grads.expect("requested gradients");
            if !b.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged {
                    step,
                    l_txt: b.l_txt,
                    l_loc: b.l_loc,
                    checkpoint: last_checkpoint,
                });
            }
            let row = LogRow {
                step,
                epoch,
                l_txt: b.l_txt,
                l_loc: b.l_loc,
                l_total: b.l_total,
            };
            debug!("step {step} epoch {epoch} l_total {:.6}", b.l_total);
            if let Some(w) = writer.as_mut() {
                w.serialize(row)?;
                w.flush()?;
            }
            log.push(row);

            if let Some(c) = config.clip_grad_norm {
                clip(&mut grads, c);
            }
            let lr = match config.schedule {
                LrSchedule::Constant => config.learning_rate,
                LrSchedule::Linear => config.learning_rate * (1.0 - step as f64 / total_steps as f64),
            };
            adam.step(&mut bundle, &grads, lr, config);
            step += 1;

            if let Some(dir) = out_dir {
                if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                    last_checkpoint = Some(save_checkpoint(&bundle, dir, &format!("step_{step}.ckpt"))?);
                }
            }
        }
        info!("epoch {epoch} done after {step} steps");
    }

    let final_checkpoint = match out_dir {
        Some(dir) => Some(save_checkpoint(&bundle, dir, "final.ckpt")?),
        None => None,
    };
    Ok(TrainOutcome {
        bundle,
        log,
        final_checkpoint,
    })
}
