//! Mini-batch training with per-graph tapes and an in-order reduction.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::record_hod;
use super::params::{adam_step, AdamConfig, Gradients, OptimizerState, ParamStore};
use super::tape::{loss_value, Loss, Tape};
use crate::error::{Error, Result};
use crate::graph::{Dataset, Graph, Task};
use crate::hod::HodModel;

/// Largest model for which finite-difference gradients are allowed.
pub const MAX_FD_PARAMS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    Tape,
    /// Central differences on the plain forward pass, for cross-checking.
    FiniteDiff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub adam: AdamConfig,
    pub loss: Loss,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Report zero wall-clock times so histories compare bitwise.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "default_grad_mode")]
    pub grad_mode: GradMode,
}

fn default_grad_mode() -> GradMode {
    GradMode::Tape
}

impl TrainConfig {
    pub fn new(loss: Loss, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig { adam: AdamConfig::default(), loss, epochs, batch_size, seed, deterministic: true, grad_mode: GradMode::Tape }
    }

    pub fn validate(&self, task: Task) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be positive".into()));
        }
        let classification = task == Task::GraphClassification;
        if classification != (self.loss == Loss::BceLogits) {
            return Err(Error::Validation(format!("loss {:?} does not fit task {task:?}", self.loss)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: HodModel,
    pub optimizer_state: OptimizerState,
    pub epoch: usize,
}

#[derive(Clone, Debug)]
pub struct History {
    /// Losses of the untrained model.
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Checkpoint with the lowest validation loss; epoch 0 is the initial model.
    pub best: Checkpoint,
    pub best_val_loss: f64,
}

impl History {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = String::from("epoch,train_loss,val_loss,seconds\n");
        for e in &self.epochs {
            text.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.seconds));
        }
        crate::graph::write_string(path.as_ref(), &text)
    }
}

/// Prediction target of graph `g` shaped like the model's output.
pub fn target(g: &Graph, task: Task) -> Result<Array2<f64>> {
    let missing = || Error::Validation(format!("graph lacks a label for {task:?}"));
    Ok(match task {
        Task::NodeRegression => {
            let y = g.node_labels().ok_or_else(missing)?;
            Array2::from_shape_vec((y.len(), 1), y.to_vec()).expect("column of labels")
        }
        _ => {
            let y = g.graph_label().ok_or_else(missing)?;
            Array2::from_shape_vec((1, y.len()), y.to_vec()).expect("row of labels")
        }
    })
}

fn check_head(model: &HodModel, task: Task) -> Result<()> {
    let graph_head = model.downstream.readout.is_some();
    if graph_head == task.is_node_level() {
        return Err(Error::Validation(format!("model head does not match task {task:?}")));
    }
    Ok(())
}

/// Loss of `model` on a single graph, without gradients.
pub fn graph_loss(model: &HodModel, g: &Graph, task: Task, loss: Loss) -> Result<f64> {
    let pred = model.forward(g)?.prediction;
    let y = target(g, task)?;
    if pred.dim() != y.dim() {
        return Err(Error::width("prediction", y.len(), pred.len()));
    }
    Ok(loss_value(&pred, &y, loss))
}

/// Loss on one graph and its gradient for every parameter, via the tape.
pub fn loss_and_grads(model: &HodModel, g: &Graph, task: Task, loss: Loss) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new(g);
    let pred = record_hod(&mut tape, model)?;
    let l = tape.loss(pred, target(g, task)?, loss)?;
    let value = tape.dense(l)[[0, 0]];
    let grads = tape.backward(l, Array2::ones((1, 1)))?;
    Ok((value, grads))
}

/// Central-difference gradients of [`graph_loss`] with step `h`.
pub fn fd_grads(model: &HodModel, g: &Graph, task: Task, loss: Loss, h: f64) -> Result<(f64, Gradients)> {
    let value = graph_loss(model, g, task, loss)?;
    let mut grads = Gradients::new();
    for (name, _, shape, values) in model.param_list() {
        let mut grad = Array2::zeros(shape);
        for (i, gi) in grad.iter_mut().enumerate() {
            let eval = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                m.visit_params(&mut |n, _, _, vals| {
                    if n == name {
                        vals[i] = values[i] + delta;
                    }
                });
                graph_loss(&m, g, task, loss)
            };
            *gi = (eval(h)? - eval(-h)?) / (2.0 * h);
        }
        grads.insert(name, grad);
    }
    Ok((value, grads))
}

/// Mean loss over the listed graphs.
pub fn evaluate(model: &HodModel, data: &Dataset, indices: &[usize], loss: Loss) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let losses: Vec<f64> = indices.par_iter().map(|&i| graph_loss(model, &data.graphs[i], data.task, loss)).collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / indices.len() as f64)
}

/// Population standard deviation of every target value in the training split.
pub fn target_std(data: &Dataset) -> Result<f64> {
    let mut values = Vec::new();
    for &i in &data.split.train {
        values.extend(target(&data.graphs[i], data.task)?.iter().copied());
    }
    if values.is_empty() {
        return Err(Error::Validation("training split has no targets".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / values.len() as f64;
    Ok(var.sqrt())
}

/// Mean absolute error over all target values of the listed graphs, divided by
/// the standard deviation of the training targets.
pub fn normalized_mae(model: &HodModel, data: &Dataset, indices: &[usize]) -> Result<f64> {
    let std = target_std(data)?;
    let errors: Vec<(f64, usize)> = indices
        .par_iter()
        .map(|&i| {
            let g = &data.graphs[i];
            let pred = model.forward(g)?.prediction;
            let y = target(g, data.task)?;
            Ok(((&pred - &y).mapv(f64::abs).sum(), y.len()))
        })
        .collect::<Result<_>>()?;
    let (total, count) = errors.iter().fold((0.0, 0), |(s, c), &(e, n)| (s + e, c + n));
    if count == 0 {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    Ok(total / count as f64 / std.max(f64::EPSILON))
}

fn batch_grads(model: &HodModel, data: &Dataset, batch: &[usize], cfg: &TrainConfig) -> Result<Vec<(f64, Gradients)>> {
    batch
        .par_iter()
        .map(|&i| {
            let g = &data.graphs[i];
            match cfg.grad_mode {
                GradMode::Tape => loss_and_grads(model, g, data.task, cfg.loss),
                GradMode::FiniteDiff => fd_grads(model, g, data.task, cfg.loss, 1e-6),
            }
        })
        .collect()
}

pub fn train(model: &HodModel, data: &Dataset, cfg: &TrainConfig) -> Result<History> {
    cfg.validate(data.task)?;
    check_head(model, data.task)?;
    data.validate()?;
    if data.split.train.is_empty() || data.split.val.is_empty() {
        return Err(Error::Training("training and validation splits must be non-empty".into()));
    }
    let mut model = model.clone();
    let mut store = ParamStore::from_model(&model)?;
    if cfg.grad_mode == GradMode::FiniteDiff && store.num_values() > MAX_FD_PARAMS {
        return Err(Error::Validation(format!(
            "finite-difference training is limited to {MAX_FD_PARAMS} parameters, model has {}",
            store.num_values()
        )));
    }
    let initial_train_loss = evaluate(&model, data, &data.split.train, cfg.loss)?;
    let initial_val_loss = evaluate(&model, data, &data.split.val, cfg.loss)?;
    let mut best = Checkpoint { model: model.clone(), optimizer_state: store.optimizer_state(), epoch: 0 };
    let mut best_val_loss = initial_val_loss;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = data.split.train.clone();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = batch_grads(&model, data, batch, cfg)?;
            store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for (loss, grads) in &results {
                if !loss.is_finite() {
                    return Err(Error::Training(format!("non-finite loss at epoch {epoch}, batch {b}")));
                }
                total += loss;
                store.accumulate(grads, scale)?;
            }
            adam_step(&mut store, &cfg.adam);
            store.write_to(&mut model);
        }
        let train_loss = total / order.len() as f64;
        let val_loss = evaluate(&model, data, &data.split.val, cfg.loss)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss at epoch {epoch}")));
        }
        let seconds = if cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best = Checkpoint { model: model.clone(), optimizer_state: store.optimizer_state(), epoch };
        }
        epochs.push(EpochRecord { epoch, train_loss, val_loss, seconds });
    }
    Ok(History { initial_train_loss, initial_val_loss, epochs, best, best_val_loss })
}

/// Writes the model JSON with `optimizer_state` and `epoch` added at the top
/// level.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut value = serde_json::to_value(&ckpt.model).expect("model serializes");
    let obj = value.as_object_mut().expect("model serializes to an object");
    obj.insert("optimizer_state".into(), serde_json::to_value(&ckpt.optimizer_state).expect("state serializes"));
    obj.insert("epoch".into(), ckpt.epoch.into());
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    serde_json::to_writer(&mut file, &value).expect("checkpoint serializes");
    file.write_all(b"\n").map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut value: serde_json::Value = crate::graph::parse_json_file(path)?;
    let parse = |source| Error::Parse { context: path.display().to_string(), source };
    let obj = value.as_object_mut().ok_or_else(|| Error::Validation(format!("{} is not a JSON object", path.display())))?;
    let state = obj.remove("optimizer_state").ok_or_else(|| Error::Validation("checkpoint lacks optimizer_state".into()))?;
    let epoch = obj.remove("epoch").ok_or_else(|| Error::Validation("checkpoint lacks epoch".into()))?;
    Ok(Checkpoint {
        optimizer_state: serde_json::from_value(state).map_err(parse)?,
        epoch: serde_json::from_value(epoch).map_err(parse)?,
        model: serde_json::from_value(value).map_err(parse)?,
    })
}
