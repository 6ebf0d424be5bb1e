//! Cross-entropy loss, Adam, and the training loop: per-epoch
//! validation, best and last checkpoints, CSV loss curves, resumable
//! optimizer state.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::container::{lookup, read_container, write_container, Entry};
use crate::data::{epoch_batches, load_batch, AugmentConfig, DatasetIndex};
use crate::error::{Error, Result};
use crate::model::{FaNet, Param};
use crate::tensor::{add_into, Node, Tape, Tensor};

/// Mean over the batch of -log softmax(logits)[label], as one fused
/// node (log-softmax is max-subtracted, so huge logits stay finite).
/// Optional per-class weights turn the mean into a weighted mean.
pub fn cross_entropy_loss(
    tape: &mut Tape,
    logits: Tensor,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<Tensor> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::BadShape {
            op: "cross_entropy_loss",
            expected: "rank-2 logits [N, K]".into(),
            shape,
        });
    }
    let (n, k) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::Invalid(format!(
            "{} labels for a batch of {n} logits rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    if let Some(w) = class_weights {
        if w.len() != k {
            return Err(Error::Invalid(format!(
                "{} class weights for {k} classes",
                w.len()
            )));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid("class weights must be finite and non-negative".into()));
        }
    }

    let z = tape.data(logits);
    let mut probs = vec![0.0; n * k];
    let mut weights = Vec::with_capacity(n);
    let mut loss = 0.0;
    let mut weight_sum = 0.0;
    for i in 0..n {
        let row = &z[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[i * k + j] = e;
            denom += e;
        }
        for j in 0..k {
            probs[i * k + j] /= denom;
        }
        let w = class_weights.map_or(1.0, |w| w[labels[i]]);
        loss += w * (denom.ln() - (row[labels[i]] - max));
        weight_sum += w;
        weights.push(w);
    }
    if weight_sum <= 0.0 {
        return Err(Error::Invalid(
            "class weights eliminate every sample in the batch".into(),
        ));
    }
    let loss = loss / weight_sum;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }

    let labels = labels.to_vec();
    let zid = logits.id;
    let bw = move |g: &[f64], _nodes: &[Node], grads: &mut [Option<Vec<f64>>]| {
        let g0 = g[0];
        let mut dz = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                dz[i * k + j] = g0 * weights[i] * (probs[i * k + j] - onehot) / weight_sum;
            }
        }
        add_into(grads, zid, &dz);
    };
    Ok(tape.push(vec![loss], vec![], Some(Box::new(bw))))
}

/// Bias-corrected Adam. One `step` call updates every parameter and
/// advances t once.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &FaNet, lr: f64) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: model.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: model.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    fn from_parts(lr: f64, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut [Param], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if grads[i].len() != p.value.len() {
                return Err(Error::Invalid(format!(
                    "gradient for '{}' has {} values, parameter has {}",
                    p.name,
                    grads[i].len(),
                    p.value.len()
                )));
            }
            for (j, &g) in grads[i].iter().enumerate() {
                let m = &mut self.m[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                let v = &mut self.v[i][j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                p.value[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// None disables augmentation (val and test are never augmented).
    pub augment: Option<AugmentConfig>,
    /// Inverse-frequency class weights in the training loss.
    pub class_weights: bool,
    pub checkpoint_every: Option<usize>,
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 48,
            lr: 1e-4,
            seed: 0,
            augment: None,
            class_weights: false,
            checkpoint_every: None,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch size must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Invalid(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.checkpoint_every == Some(0) || self.early_stop_patience == Some(0) {
            return Err(Error::Invalid(
                "checkpoint cadence and patience must be positive when set".into(),
            ));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// Optimizer and progress state carried inside a checkpoint so
/// training can resume exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_loss: f64,
}

pub struct Checkpoint {
    pub model: FaNet,
    pub trainer: Option<TrainerState>,
}

pub fn save_checkpoint(path: &Path, model: &FaNet, trainer: Option<&TrainerState>) -> Result<()> {
    let mut entries = model.to_entries();
    if let Some(ts) = trainer {
        entries.push(Entry::scalar("train.epoch", ts.epoch as f64));
        entries.push(Entry::scalar("train.best_val_loss", ts.best_val_loss));
        entries.push(Entry::scalar("train.adam.t", ts.adam.t as f64));
        entries.push(Entry::scalar("train.adam.lr", ts.adam.lr));
        for (i, p) in model.params.iter().enumerate() {
            entries.push(Entry::f64(
                format!("train.adam.m.{}", p.name),
                p.shape.clone(),
                ts.adam.m[i].clone(),
            ));
            entries.push(Entry::f64(
                format!("train.adam.v.{}", p.name),
                p.shape.clone(),
                ts.adam.v[i].clone(),
            ));
        }
    }
    write_container(path, &entries)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let entries = read_container(path)?;
    let model = FaNet::from_entries(&entries)?;
    let trainer = if lookup(&entries, "train.epoch").is_some() {
        let scalar = |name: &str| -> Result<f64> {
            lookup(&entries, name)
                .and_then(|e| e.data.first().copied())
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing entry '{name}'")))
        };
        let mut m = Vec::with_capacity(model.params.len());
        let mut v = Vec::with_capacity(model.params.len());
        for p in &model.params {
            for (store, tag) in [(&mut m, "m"), (&mut v, "v")] {
                let name = format!("train.adam.{tag}.{}", p.name);
                let e = lookup(&entries, &name).ok_or_else(|| {
                    Error::IncompatibleCheckpoint(format!("missing optimizer entry '{name}'"))
                })?;
                if e.data.len() != p.value.len() {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "optimizer entry '{name}' has wrong length"
                    )));
                }
                store.push(e.data.clone());
            }
        }
        Some(TrainerState {
            adam: AdamState::from_parts(scalar("train.adam.lr")?, scalar("train.adam.t")? as u64, m, v),
            epoch: scalar("train.epoch")? as usize,
            best_val_loss: scalar("train.best_val_loss")?,
        })
    } else {
        None
    };
    Ok(Checkpoint { model, trainer })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub epochs: Vec<EpochStats>,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct_count(logits: &[f64], k: usize, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax_row(&logits[i * k..(i + 1) * k]) == l)
        .count()
}

fn inverse_frequency_weights(idx: &DatasetIndex) -> Vec<f64> {
    let counts = idx.class_histogram();
    let n = idx.len() as f64;
    let k = counts.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (k * c as f64) })
        .collect()
}

/// Forward-only loss and accuracy over a split, in index order.
pub fn evaluate_split(
    model: &FaNet,
    idx: &DatasetIndex,
    batch_size: usize,
    h: usize,
    w: usize,
) -> Result<(f64, f64)> {
    if idx.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let ids: Vec<usize> = (0..idx.len()).collect();
    let k = model.config.num_classes;
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for chunk in ids.chunks(batch_size) {
        let batch = load_batch(idx, chunk, h, w, None)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let x = tape.leaf(batch.images, &[batch.n, h, w, 3])?;
        let logits = bound.forward(&mut tape, x)?;
        let loss = cross_entropy_loss(&mut tape, logits, &batch.labels, None)?;
        loss_sum += tape.scalar(loss)? * batch.n as f64;
        correct += correct_count(tape.data(logits), k, &batch.labels);
    }
    Ok((
        loss_sum / idx.len() as f64,
        correct as f64 / idx.len() as f64,
    ))
}

/// Train in place. Artifacts under `out_dir`: log.csv (appended on
/// resume), best.fant (lowest val loss), last.fant (every epoch), and
/// epoch_NNNN.fant at the configured cadence.
pub fn fit(
    model: &mut FaNet,
    train_idx: &DatasetIndex,
    val_idx: &DatasetIndex,
    cfg: &TrainConfig,
    resume: Option<TrainerState>,
    out_dir: &Path,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Data(
            "training and validation splits must both be non-empty".into(),
        ));
    }
    if train_idx.class_count() != model.config.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes but the model expects {}",
            train_idx.class_count(),
            model.config.num_classes
        )));
    }
    fs::create_dir_all(out_dir)?;
    let (h, w) = (model.config.backbone.input_h, model.config.backbone.input_w);
    let k = model.config.num_classes;
    let class_weights = if cfg.class_weights {
        Some(inverse_frequency_weights(train_idx))
    } else {
        None
    };

    let (mut adam, start_epoch, mut best_val) = match resume {
        Some(ts) => {
            if ts.adam.m.len() != model.params.len() {
                return Err(Error::IncompatibleCheckpoint(
                    "optimizer state does not match the model parameters".into(),
                ));
            }
            (ts.adam, ts.epoch, ts.best_val_loss)
        }
        None => (AdamState::new(model, cfg.lr), 0, f64::INFINITY),
    };

    let log_path = out_dir.join("log.csv");
    let fresh_log = start_epoch == 0 || !log_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(!fresh_log)
        .write(true)
        .truncate(fresh_log)
        .open(&log_path)?;
    if fresh_log {
        writeln!(log, "epoch,train_loss,train_acc,val_loss,val_acc")?;
    }

    let mut rows = Vec::new();
    let mut since_best = 0usize;
    let mut stopped_early = false;
    for e in start_epoch..cfg.epochs {
        let plan = epoch_batches(train_idx, cfg.batch_size, cfg.seed, e)?;
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (bi, ids) in plan.iter().enumerate() {
            let batch = load_batch(train_idx, ids, h, w, cfg.augment.as_ref().map(|a| (a, e)))?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let x = tape.leaf(batch.images, &[batch.n, h, w, 3])?;
            let logits = bound.forward(&mut tape, x)?;
            let batch_tag = || format!("batch {bi} of epoch {}", e + 1);
            let loss = cross_entropy_loss(&mut tape, logits, &batch.labels, class_weights.as_deref())
                .map_err(|err| match err {
                    Error::NonFinite(what) => Error::NonFinite(format!("{what} in {}", batch_tag())),
                    other => other,
                })?;
            let loss_value = tape.scalar(loss)?;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!("loss in {}", batch_tag())));
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = bound
                .tensors
                .iter()
                .zip(&model.params)
                .map(|(&t, p)| {
                    tape.grad(t)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; p.value.len()])
                })
                .collect();
            adam.step(&mut model.params, &grads)?;
            loss_sum += loss_value * batch.n as f64;
            correct += correct_count(tape.data(logits), k, &batch.labels);
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let train_acc = correct as f64 / train_idx.len() as f64;
        let (val_loss, val_acc) = evaluate_split(model, val_idx, cfg.batch_size, h, w)?;

        let row = EpochStats {
            epoch: e + 1,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        };
        writeln!(
            log,
            "{},{},{},{},{}",
            row.epoch, row.train_loss, row.train_acc, row.val_loss, row.val_acc
        )?;
        log.flush()?;
        println!(
            "epoch {:>3}/{} train_loss {:.6} train_acc {:.4} val_loss {:.6} val_acc {:.4}",
            row.epoch, cfg.epochs, row.train_loss, row.train_acc, row.val_loss, row.val_acc
        );
        rows.push(row);

        let improved = val_loss < best_val;
        if improved {
            best_val = val_loss;
            since_best = 0;
        } else {
            since_best += 1;
        }
        let trainer = TrainerState {
            adam: adam.clone(),
            epoch: e + 1,
            best_val_loss: best_val,
        };
        save_checkpoint(&out_dir.join("last.fant"), model, Some(&trainer))?;
        if improved {
            save_checkpoint(&out_dir.join("best.fant"), model, Some(&trainer))?;
        }
        if let Some(every) = cfg.checkpoint_every {
            if (e + 1) % every == 0 {
                save_checkpoint(
                    &out_dir.join(format!("epoch_{:04}.fant", e + 1)),
                    model,
                    Some(&trainer),
                )?;
            }
        }
        if let Some(patience) = cfg.early_stop_patience {
            if since_best >= patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(FitOutcome {
        epochs: rows,
        best_val_loss: best_val,
        stopped_early,
    })
}
