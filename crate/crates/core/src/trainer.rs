//! Cross-entropy training, dense-head fine-tuning and classification metrics.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fcn::network::{apply_running_stats, argmax, backprop, softmax};
use crate::fcn::{forward, input_batch, FcnModel, Mode, ReluGate};
use crate::signal::{LabeledDataset, ReshapedInput, SplitIndices};

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean categorical cross-entropy of `probs` against `targets`, both
/// `batch × classes` row-major.
pub fn cce_loss(probs: &[f64], targets: &[f64], classes: usize) -> Result<f64> {
    if classes == 0 || probs.len() != targets.len() || probs.len() % classes != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities vs {} targets over {classes} classes",
            probs.len(),
            targets.len()
        )));
    }
    let batch = probs.len() / classes;
    if batch == 0 {
        return Ok(0.0);
    }
    let total: f64 = probs
        .iter()
        .zip(targets)
        .filter(|(_, &y)| y != 0.0)
        .map(|(&p, &y)| -y * p.max(PROB_FLOOR).ln())
        .sum();
    Ok(total / batch as f64)
}

/// Loss of integer labels against a probability matrix.
fn label_loss(probs: &[f64], labels: &[usize], classes: usize) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(b, &y)| -probs[b * classes + y].max(PROB_FLOOR).ln())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Sgd { momentum } => write!(f, "sgd(momentum={momentum})"),
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                write!(f, "adam(beta1={beta1},beta2={beta2},epsilon={epsilon})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam(),
            patience: Some(15),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be at least 2 for batch normalization, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be finite and ≥ 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// First-order optimizer state for a list of parameter arrays.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            lr,
            step: 0,
            first: zeros(),
            second,
        }
    }

    pub fn update(&mut self, params: Vec<&mut [f32]>, grads: &[&[f32]]) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), vel) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for ((w, &d), v) in p.iter_mut().zip(g.iter()).zip(vel.iter_mut()) {
                        *v = momentum * *v + d as f64;
                        *w = (*w as f64 - self.lr * *v) as f32;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((w, &d), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let d = d as f64;
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        let step = self.lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                        *w = (*w as f64 - step) as f32;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were restored.
    pub best_epoch: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
}

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.get(self.best_epoch.checked_sub(1)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,train_loss,val_loss,train_acc,val_acc")?;
        for r in &self.records {
            writeln!(
                f,
                "{},{:.6},{:.6},{:.4},{:.4}",
                r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

fn reshaped(model: &FcnModel<f32>, ds: &LabeledDataset, indices: &[usize]) -> Vec<ReshapedInput> {
    let layout = model.variant().layout();
    indices.iter().map(|&i| ds.signal(i).reshape(layout)).collect()
}

fn check_compatible(model: &FcnModel<f32>, ds: &LabeledDataset) -> Result<()> {
    let cfg = &model.config;
    if (cfg.t, cfg.l) != (ds.time_steps(), ds.leads()) || cfg.class_count != ds.class_count() {
        return Err(Error::ShapeMismatch(format!(
            "model built for T={} L={} C={}, dataset has T={} L={} C={}",
            cfg.t,
            cfg.l,
            cfg.class_count,
            ds.time_steps(),
            ds.leads(),
            ds.class_count()
        )));
    }
    Ok(())
}

fn check_split(ds: &LabeledDataset, split: &SplitIndices) -> Result<()> {
    let n = ds.len();
    if let Some(&i) = split.train.iter().chain(&split.val).chain(&split.test).find(|&&i| i >= n) {
        return Err(Error::InvalidDataset(format!("split index {i} outside dataset of {n}")));
    }
    if split.train.len() < 2 {
        return Err(Error::TooFewSamples(format!(
            "{} training samples; batch normalization needs at least 2",
            split.train.len()
        )));
    }
    Ok(())
}

/// Minibatches of a shuffled index list; a trailing batch of one sample is
/// merged into its predecessor.
fn minibatches(indices: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

const INFERENCE_CHUNK: usize = 64;

/// Class probabilities (`indices.len() × C`, f64) in inference mode.
pub fn predict_proba(model: &FcnModel<f32>, ds: &LabeledDataset, indices: &[usize]) -> Result<Vec<f64>> {
    check_compatible(model, ds)?;
    let mut out = Vec::with_capacity(indices.len() * model.class_count());
    for chunk in indices.chunks(INFERENCE_CHUNK) {
        let inputs = reshaped(model, ds, chunk);
        let refs: Vec<&ReshapedInput> = inputs.iter().collect();
        let cache = forward(model, input_batch(&model.config, &refs)?, Mode::Inference)?;
        out.extend(cache.probs.iter().map(|&p| p as f64));
    }
    Ok(out)
}

/// Argmax predictions (ties toward the smaller class index).
pub fn predict(model: &FcnModel<f32>, ds: &LabeledDataset, indices: &[usize]) -> Result<Vec<usize>> {
    let c = model.class_count();
    Ok(predict_proba(model, ds, indices)?.chunks(c).map(argmax).collect())
}

/// Mean loss and accuracy on `indices` in inference mode.
fn inference_loss(model: &FcnModel<f32>, ds: &LabeledDataset, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let c = model.class_count();
    let probs = predict_proba(model, ds, indices)?;
    let labels: Vec<usize> = indices.iter().map(|&i| ds.label(i)).collect();
    let loss = label_loss(&probs, &labels, c) / indices.len() as f64;
    let correct = probs.chunks(c).zip(&labels).filter(|(p, &y)| argmax(p) == y).count();
    Ok((loss, correct as f64 / indices.len() as f64))
}

/// Tracks the best validation loss and decides when to stop.
struct Selection<M> {
    best_loss: f64,
    best_epoch: usize,
    best: M,
    patience: Option<usize>,
}

impl<M: Clone> Selection<M> {
    fn new(initial: M, patience: Option<usize>) -> Self {
        Self {
            best_loss: f64::INFINITY,
            best_epoch: 0,
            best: initial,
            patience,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, epoch: usize, loss: f64, current: &M) -> bool {
        if loss < self.best_loss || self.best_epoch == 0 {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.best = current.clone();
        }
        self.patience.is_some_and(|p| epoch - self.best_epoch >= p)
    }
}

/// Minibatch training on the train split. The parameters of the epoch with
/// the lowest validation loss (training loss when the validation split is
/// empty) are returned.
pub fn fit(
    model: FcnModel<f32>,
    ds: &LabeledDataset,
    split: &SplitIndices,
    cfg: &TrainConfig,
) -> Result<(FcnModel<f32>, History)> {
    cfg.validate()?;
    check_compatible(&model, ds)?;
    check_split(ds, split)?;
    let mut model = model;
    let classes = model.class_count();
    let sizes: Vec<usize> = model.trainable().iter().map(|s| s.len()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut select = Selection::new(model.clone(), cfg.patience);
    let mut records = Vec::new();

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in minibatches(&split.train, cfg.batch_size, &mut rng) {
            let inputs = reshaped(&model, ds, &batch);
            let refs: Vec<&ReshapedInput> = inputs.iter().collect();
            let labels: Vec<usize> = batch.iter().map(|&i| ds.label(i)).collect();
            let cache = forward(&model, input_batch(&model.config, &refs)?, Mode::Train)?;
            let probs: Vec<f64> = cache.probs.iter().map(|&p| p as f64).collect();
            let loss = label_loss(&probs, &labels, classes);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss;
            correct += probs.chunks(classes).zip(&labels).filter(|(p, &y)| argmax(p) == y).count();

            let scale = 1.0 / batch.len() as f32;
            let mut d_logits = cache.probs.clone();
            for (b, &y) in labels.iter().enumerate() {
                d_logits[b * classes + y] -= 1.0;
            }
            d_logits.iter_mut().for_each(|d| *d *= scale);
            let grads = backprop(&model, &cache, &d_logits, ReluGate::Standard, true, false)?
                .params
                .expect("requested");
            opt.update(model.trainable_mut(), &grads.slices());
            // a zero learning rate leaves the whole model, running statistics included, untouched
            if cfg.learning_rate > 0.0 {
                apply_running_stats(&mut model, &cache);
            }
        }
        let n = split.train.len() as f64;
        let (val_loss, val_acc) = inference_loss(&model, ds, &split.val)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            val_loss,
            train_acc: correct as f64 / n,
            val_acc,
        };
        if !rec.train_loss.is_finite() || (!split.val.is_empty() && !val_loss.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        records.push(rec);
        let criterion = if split.val.is_empty() { rec.train_loss } else { val_loss };
        if select.observe(epoch, criterion, &model) {
            break;
        }
    }
    let history = History {
        records,
        best_epoch: select.best_epoch,
        optimizer: cfg.optimizer,
        learning_rate: cfg.learning_rate,
    };
    Ok((select.best, history))
}

/// Global-average-pooled features in inference mode, `indices.len() × M`.
pub fn pooled_features(model: &FcnModel<f32>, ds: &LabeledDataset, indices: &[usize]) -> Result<Vec<f32>> {
    check_compatible(model, ds)?;
    let mut out = Vec::with_capacity(indices.len() * model.last_channels());
    for chunk in indices.chunks(INFERENCE_CHUNK) {
        let inputs = reshaped(model, ds, chunk);
        let refs: Vec<&ReshapedInput> = inputs.iter().collect();
        let cache = forward(model, input_batch(&model.config, &refs)?, Mode::Inference)?;
        out.extend_from_slice(&cache.pooled);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
struct Head {
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl Head {
    fn probs(&self, v: &[f32], m: usize, classes: usize) -> Vec<f64> {
        let mut z: Vec<f64> = self.bias.iter().map(|&b| b as f64).collect();
        for (j, &x) in v[..m].iter().enumerate() {
            for (zc, &w) in z.iter_mut().zip(&self.weights[j * classes..(j + 1) * classes]) {
                *zc += x as f64 * w as f64;
            }
        }
        softmax(&z)
    }

    fn loss_acc(&self, feats: &[f32], labels: &[usize], m: usize, classes: usize) -> (f64, f64) {
        if labels.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let mut loss = 0.0;
        let mut correct = 0;
        for (v, &y) in feats.chunks(m).zip(labels) {
            let p = self.probs(v, m, classes);
            loss -= p[y].max(PROB_FLOOR).ln();
            correct += usize::from(argmax(&p) == y);
        }
        let n = labels.len() as f64;
        (loss / n, correct as f64 / n)
    }
}

/// Retrain only the dense head on frozen convolutional features. Conv
/// weights, batch-norm parameters and running statistics are left untouched.
pub fn fine_tune(
    model: FcnModel<f32>,
    ds: &LabeledDataset,
    split: &SplitIndices,
    cfg: &TrainConfig,
) -> Result<(FcnModel<f32>, History)> {
    cfg.validate()?;
    check_compatible(&model, ds)?;
    check_split(ds, split)?;
    let m = model.last_channels();
    let classes = model.class_count();
    let train_feats = pooled_features(&model, ds, &split.train)?;
    let val_feats = pooled_features(&model, ds, &split.val)?;
    let val_labels: Vec<usize> = split.val.iter().map(|&i| ds.label(i)).collect();
    let position: std::collections::HashMap<usize, usize> =
        split.train.iter().enumerate().map(|(k, &i)| (i, k)).collect();

    let mut head = Head {
        weights: model.dense.weights.clone(),
        bias: model.dense.bias.clone(),
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &[m * classes, classes]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut select = Selection::new(head.clone(), cfg.patience);
    let mut records = Vec::new();

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in minibatches(&split.train, cfg.batch_size, &mut rng) {
            let mut gw = vec![0.0f32; m * classes];
            let mut gb = vec![0.0f32; classes];
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let v = &train_feats[position[&i] * m..][..m];
                let y = ds.label(i);
                let mut p = head.probs(v, m, classes);
                loss_sum -= p[y].max(PROB_FLOOR).ln();
                correct += usize::from(argmax(&p) == y);
                p[y] -= 1.0;
                for (c, d) in p.iter().enumerate() {
                    let d = d * scale;
                    gb[c] += d as f32;
                    for j in 0..m {
                        gw[j * classes + c] += (v[j] as f64 * d) as f32;
                    }
                }
            }
            opt.update(vec![&mut head.weights[..], &mut head.bias[..]], &[&gw, &gb]);
        }
        let n = split.train.len() as f64;
        let (val_loss, val_acc) = head.loss_acc(&val_feats, &val_labels, m, classes);
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            val_loss,
            train_acc: correct as f64 / n,
            val_acc,
        };
        if !rec.train_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        records.push(rec);
        let criterion = if split.val.is_empty() { rec.train_loss } else { val_loss };
        if select.observe(epoch, criterion, &head) {
            break;
        }
    }
    let mut model = model;
    model.dense.weights = select.best.weights;
    model.dense.bias = select.best.bias;
    let history = History {
        records,
        best_epoch: select.best_epoch,
        optimizer: cfg.optimizer,
        learning_rate: cfg.learning_rate,
    };
    Ok((model, history))
}

/// Confusion counts and rates of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl ClassStats {
    pub fn cardinality(&self) -> usize {
        self.tp + self.fn_
    }

    /// TP / (TP + FN) in percent; undefined without positives.
    pub fn sensitivity(&self) -> Option<f64> {
        percent(self.tp, self.tp + self.fn_)
    }

    /// TN / (TN + FP) in percent; undefined without negatives.
    pub fn specificity(&self) -> Option<f64> {
        percent(self.tn, self.tn + self.fp)
    }
}

fn percent(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub per_class: Vec<ClassStats>,
    pub correct: usize,
    pub total: usize,
}

impl ClassMetrics {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], class_count: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        if let Some(&c) = truth.iter().chain(predicted).find(|&&c| c >= class_count) {
            return Err(Error::ClassOutOfRange { class: c, class_count });
        }
        let n = truth.len();
        let per_class = (0..class_count)
            .map(|c| {
                let mut s = ClassStats { tp: 0, fn_: 0, fp: 0, tn: 0 };
                for (&t, &p) in truth.iter().zip(predicted) {
                    match (t == c, p == c) {
                        (true, true) => s.tp += 1,
                        (true, false) => s.fn_ += 1,
                        (false, true) => s.fp += 1,
                        (false, false) => s.tn += 1,
                    }
                }
                s
            })
            .collect();
        let correct = truth.iter().zip(predicted).filter(|(t, p)| t == p).count();
        Ok(Self {
            per_class,
            correct,
            total: n,
        })
    }

    /// Overall accuracy in percent (0 for an empty evaluation set).
    pub fn accuracy(&self) -> f64 {
        percent(self.correct, self.total).unwrap_or(0.0)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "class,cardinality,tp,fn,fp,tn,sensitivity,specificity")?;
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.2}"));
        for (c, s) in self.per_class.iter().enumerate() {
            writeln!(
                f,
                "{c},{},{},{},{},{},{},{}",
                s.cardinality(),
                s.tp,
                s.fn_,
                s.fp,
                s.tn,
                fmt(s.sensitivity()),
                fmt(s.specificity())
            )?;
        }
        writeln!(f, "overall,{},{},,,,{:.2},", self.total, self.correct, self.accuracy())?;
        f.flush()?;
        Ok(())
    }
}

pub fn evaluate(model: &FcnModel<f32>, ds: &LabeledDataset, indices: &[usize]) -> Result<ClassMetrics> {
    let predicted = predict(model, ds, indices)?;
    let truth: Vec<usize> = indices.iter().map(|&i| ds.label(i)).collect();
    ClassMetrics::from_predictions(&truth, &predicted, ds.class_count())
}

/// Sensitivity and specificity of one group of classes, counting
/// within-group confusions as correct.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub classes: Vec<usize>,
    pub stats: ClassStats,
}

pub fn grouped_metrics(truth: &[usize], predicted: &[usize], groups: &[Vec<usize>]) -> Result<Vec<GroupMetrics>> {
    if truth.len() != predicted.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for g in groups {
        if g.is_empty() {
            return Err(Error::EmptyGroup("a class group has no members".into()));
        }
        for &c in g {
            if !seen.insert(c) {
                return Err(Error::OverlappingGroups(c));
            }
        }
    }
    Ok(groups
        .iter()
        .map(|g| {
            let mut s = ClassStats { tp: 0, fn_: 0, fp: 0, tn: 0 };
            for (t, p) in truth.iter().zip(predicted) {
                match (g.contains(t), g.contains(p)) {
                    (true, true) => s.tp += 1,
                    (true, false) => s.fn_ += 1,
                    (false, true) => s.fp += 1,
                    (false, false) => s.tn += 1,
                }
            }
            GroupMetrics {
                classes: g.clone(),
                stats: s,
            }
        })
        .collect())
}
