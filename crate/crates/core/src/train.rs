//! Minibatch training with best-checkpoint tracking and exact resume.
//!
//! Output directory layout:
//!
//! ```text
//! OUT/config.json      model config sidecar
//! OUT/best.fnt1        parameters at the lowest monitored loss
//! OUT/last.fnt1        parameters, Adam moments and counters after the last epoch
//! OUT/history.jsonl    one EpochRecord per line
//! ```
//! Parameters, running statistics and Adam moments are kept at binary32
//! precision after every step, so `last.fnt1` captures the full state and a
//! resumed run continues bit-for-bit.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mode;
use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::fnt1;
use crate::loss::{self, LossBreakdown, LossConfig};
use crate::metrics::{ConfusionCounts, Metrics, DEFAULT_THRESHOLD};
use crate::model::{Model, CONFIG_SIDECAR};
use crate::nn::{Session, SessionOutput};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const BEST_FILE: &str = "best.fnt1";
pub const LAST_FILE: &str = "last.fnt1";
pub const HISTORY_FILE: &str = "history.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    /// Epoch (0-based) from which the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
    /// Hard cap on optimizer steps; the epoch in progress is cut short.
    pub max_steps: Option<u64>,
    /// Stop after the first epoch whose training Dice reaches this value.
    pub stop_at_train_dice: Option<f64>,
    /// Also apply the loss to every multiscale head (off by default).
    pub deep_supervision: bool,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: batch 4, otherwise the reference protocol.
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            max_epochs: 50,
            adam: AdamConfig::default(),
            lr_decay_epoch: 30,
            lr_decay_factor: 0.1,
            seed: 0,
            max_steps: None,
            stop_at_train_dice: None,
            deep_supervision: false,
        }
    }
}

impl TrainConfig {
    /// The reference protocol: batch 8, 50 epochs, no early stopping.
    pub fn reference() -> Self {
        TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(config_err!("batch_size and max_epochs must be >= 1"));
        }
        if !(self.adam.lr >= 0.0 && self.adam.eps > 0.0)
            || !(0.0..1.0).contains(&self.adam.beta1)
            || !(0.0..1.0).contains(&self.adam.beta2)
        {
            return Err(config_err!("invalid Adam hyperparameters {:?}", self.adam));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(config_err!("lr_decay_factor must be > 0"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.adam.lr * self.lr_decay_factor
        } else {
            self.adam.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed at the end of this epoch.
    pub steps: u64,
    pub lr: f64,
    /// Mean minibatch loss.
    pub train_loss: f64,
    /// Dice of the train-mode predictions made during the epoch.
    pub train_dice: f64,
    pub val_loss: Option<f64>,
    pub val_dice: Option<f64>,
    pub val_jaccard: Option<f64>,
    /// The monitored loss improved and `best.fnt1` was written.
    pub best: bool,
}

impl EpochRecord {
    /// Validation loss if there is a validation split, else training loss.
    pub fn monitored_loss(&self) -> f64 {
        self.val_loss.unwrap_or(self.train_loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub steps: u64,
    pub best_loss: f64,
    /// `stop_at_train_dice` was reached.
    pub reached_target: bool,
}

/// What one optimizer step observed.
pub struct StepResult {
    pub loss: LossBreakdown,
    pub counts: ConfusionCounts,
}

/// Forward, loss, backward and Adam update on one minibatch.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    images: &Tensor,
    masks: &Tensor,
    loss_cfg: &LossConfig,
    lr: f64,
    dropout_seed: u64,
    deep_supervision: bool,
) -> Result<StepResult> {
    let mut s = Session::new(&model.params, Mode::Train).with_seed(dropout_seed);
    let x = s.input(images.clone());
    let out = model.forward(&mut s, x)?;
    let (mut root, breakdown) = loss::loss_node(s.graph(), out.prediction, masks, loss_cfg)?;
    if deep_supervision {
        for &h in &out.scale_heads {
            let (l, _) = loss::loss_node(s.graph(), h, masks, loss_cfg)?;
            root = s.graph().add(root, l)?;
        }
    }
    let counts = ConfusionCounts::from_masks(
        masks.data(),
        s.graph_ref().value(out.prediction).data(),
        DEFAULT_THRESHOLD,
    )?;
    let SessionOutput {
        graph,
        params,
        stats,
    } = s.finish();
    let mut grads = graph.backward(root)?;
    model.params.zero_grad();
    for (name, v) in params {
        if let Some(g) = grads.take(v) {
            g.ensure_finite(&format!("gradient of {name}"))?;
            model.params.accumulate_grad(&name, &g)?;
        }
    }
    for (prefix, st) in &stats {
        model.params.update_running_stats(prefix, st)?;
    }
    adam.step(&mut model.params, lr)?;
    model.params.round_to_f32();
    model.params.zero_grad();
    Ok(StepResult {
        loss: breakdown,
        counts,
    })
}

/// Loss and overlap metrics of eval-mode predictions on `indices`.
pub fn validate(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    batch: usize,
    loss_cfg: &LossConfig,
) -> Result<(f64, Metrics)> {
    let mut counts = ConfusionCounts::default();
    let mut loss_sum = 0.0;
    let mut batches = 0;
    for chunk in indices.chunks(batch.max(1)) {
        let (x, y) = data.subset(chunk)?;
        let p = model.predict(&x, chunk.len())?;
        let (br, _) = loss::evaluate(y.data(), p.data(), loss_cfg)?;
        loss_sum += br.value;
        batches += 1;
        counts.merge(&ConfusionCounts::from_masks(
            y.data(),
            p.data(),
            DEFAULT_THRESHOLD,
        )?);
    }
    Ok((loss_sum / batches as f64, Metrics::from_counts(&counts)))
}

fn epoch_order(seed: u64, epoch: usize, train: &[usize]) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    let mut order = train.to_vec();
    order.shuffle(&mut rng);
    order
}

fn dropout_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9FB2_1C65_1E98_DF25) ^ step
}

/// Where [`train`] keeps its artifacts. Without one, nothing is written.
#[derive(Clone, Debug)]
pub struct Checkpointing {
    pub dir: PathBuf,
    /// Continue from `dir/last.fnt1` and `dir/history.jsonl` if present.
    pub resume: bool,
}

struct Resumed {
    epoch: usize,
    history: Vec<EpochRecord>,
}

/// Trains `model` in place on the dataset's training split.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    ckpt: Option<&Checkpointing>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    data.check()?;
    let train_idx = &data.meta.split.train;
    if train_idx.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    model.check_input(data.images.shape())?;
    model.params.round_to_f32();

    let mut adam = Adam::new(&model.params, cfg.adam);
    let mut history = Vec::new();
    let mut start_epoch = 0;
    if let Some(c) = ckpt {
        fs::create_dir_all(&c.dir)?;
        fnt1::write_atomic(
            &c.dir.join(CONFIG_SIDECAR),
            model.config.to_json().as_bytes(),
        )?;
        if c.resume {
            if let Some(r) = load_resume(&c.dir, model, &mut adam)? {
                start_epoch = r.epoch + 1;
                history = r.history;
            }
        }
    }
    let mut steps = adam.state.step;
    let mut best_loss = history
        .iter()
        .map(EpochRecord::monitored_loss)
        .fold(f64::INFINITY, f64::min);
    let mut reached_target = history
        .last()
        .is_some_and(|r| cfg.stop_at_train_dice.is_some_and(|t| r.train_dice >= t));

    let mut epoch = start_epoch;
    while epoch < cfg.max_epochs && !reached_target && cfg.max_steps.is_none_or(|m| steps < m) {
        let lr = cfg.lr_at(epoch);
        let order = epoch_order(cfg.seed, epoch, train_idx);
        let mut counts = ConfusionCounts::default();
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let (x, y) = data.subset(chunk)?;
            let r = train_step(
                model,
                &mut adam,
                &x,
                &y,
                loss_cfg,
                lr,
                dropout_seed(cfg.seed, steps),
                cfg.deep_supervision,
            )
            .map_err(|e| match e {
                Error::NonFinite(m) => {
                    Error::NonFinite(format!("epoch {epoch}, step {steps}, batch {chunk:?}: {m}"))
                }
                other => other,
            })?;
            steps += 1;
            loss_sum += r.loss.value;
            batches += 1;
            counts.merge(&r.counts);
        }
        let train_metrics = Metrics::from_counts(&counts);
        let (val_loss, val_metrics) = if data.meta.split.val.is_empty() {
            (None, None)
        } else {
            let (l, m) = validate(model, data, &data.meta.split.val, cfg.batch_size, loss_cfg)?;
            (Some(l), Some(m))
        };
        let mut rec = EpochRecord {
            epoch,
            steps,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            train_dice: train_metrics.dice,
            val_loss,
            val_dice: val_metrics.as_ref().map(|m| m.dice),
            val_jaccard: val_metrics.as_ref().map(|m| m.jaccard),
            best: false,
        };
        if rec.monitored_loss() < best_loss {
            best_loss = rec.monitored_loss();
            rec.best = true;
        }
        reached_target = cfg.stop_at_train_dice.is_some_and(|t| rec.train_dice >= t);
        history.push(rec);
        if let Some(c) = ckpt {
            if history.last().is_some_and(|r| r.best) {
                model.save(&c.dir.join(BEST_FILE))?;
            }
            save_state(&c.dir, model, &adam, epoch)?;
            write_history(&c.dir.join(HISTORY_FILE), &history)?;
        }
        epoch += 1;
    }
    Ok(TrainOutcome {
        history,
        steps,
        best_loss,
        reached_target,
    })
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fnt1::write_atomic(path, out.as_bytes())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let rec: EpochRecord = serde_json::from_str(line)
            .map_err(|e| Error::Checkpoint(format!("history line {}: {e}", i + 1)))?;
        if rec.epoch != out.len() {
            return Err(Error::Checkpoint(format!(
                "history line {} has epoch {}, expected {}",
                i + 1,
                rec.epoch,
                out.len()
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

fn save_state(dir: &Path, model: &Model, adam: &Adam, epoch: usize) -> Result<()> {
    let counters = Tensor::new(&[2], vec![adam.state.step as f64, epoch as f64])?;
    let mut entries: Vec<(String, &Tensor)> = model
        .params
        .iter()
        .map(|(k, p)| (k.to_string(), &p.value))
        .collect();
    for (name, slot) in adam.names().iter().zip(&adam.state.slots) {
        entries.push((format!("adam.m.{name}"), &slot.m));
        entries.push((format!("adam.v.{name}"), &slot.v));
    }
    entries.push(("train.counters".into(), &counters));
    let refs: Vec<(&str, &Tensor)> = entries.iter().map(|(k, t)| (k.as_str(), *t)).collect();
    fnt1::save(&dir.join(LAST_FILE), &refs)
}

fn load_resume(dir: &Path, model: &mut Model, adam: &mut Adam) -> Result<Option<Resumed>> {
    let state_path = dir.join(LAST_FILE);
    if !state_path.exists() {
        return Ok(None);
    }
    let history = read_history(&dir.join(HISTORY_FILE))?;
    let mut params = Vec::new();
    let mut counters = None;
    let mut moments = std::collections::HashMap::new();
    for (name, t) in fnt1::load(&state_path)? {
        if name == "train.counters" {
            counters = Some(t);
        } else if let Some(rest) = name.strip_prefix("adam.") {
            moments.insert(rest.to_string(), t);
        } else {
            params.push((name, t));
        }
    }
    let counters =
        counters.ok_or_else(|| Error::Checkpoint("state file lacks train.counters".into()))?;
    let (step, epoch) = match counters.data() {
        [s, e] => (*s as u64, *e as usize),
        _ => {
            return Err(Error::Checkpoint(
                "train.counters must hold 2 values".into(),
            ))
        }
    };
    if history.len() != epoch + 1 {
        return Err(Error::Checkpoint(format!(
            "state is at epoch {epoch} but history has {} records",
            history.len()
        )));
    }
    *model = Model::from_tensors(&model.config, params)?;
    for (name, slot) in adam
        .names()
        .to_vec()
        .iter()
        .zip(adam.state.slots.iter_mut())
    {
        for (kind, dst) in [("m", &mut slot.m), ("v", &mut slot.v)] {
            let t = moments
                .remove(&format!("{kind}.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing adam.{kind}.{name}")))?;
            if t.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "adam.{kind}.{name} has wrong shape"
                )));
            }
            *dst = t;
        }
    }
    if let Some(extra) = moments.keys().next() {
        return Err(Error::Checkpoint(format!(
            "unknown state entry adam.{extra}"
        )));
    }
    adam.state.step = step;
    Ok(Some(Resumed { epoch, history }))
}
