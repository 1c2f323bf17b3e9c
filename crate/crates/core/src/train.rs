//! Adam with linear warm-up and cosine decay, cross-entropy on the model's
//! head, periodic evaluation and checkpointing.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::net::{HeadKind, LaConvNet, NetConfig};
use crate::params::{ParamKind, ParamStore, Session};
use crate::synth::{self, Example, Kind};
use crate::tensor::{Scalar, Tensor};
use crate::text::{TokenBatch, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate and checkpoint every this many epochs (and after the last).
    pub eval_interval: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 40,
            warmup_epochs: 3,
            batch_size: 32,
            seed: 0,
            eval_interval: 1,
            clip: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "need 0 <= warmup epochs ({}) < epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::config("batch size and eval interval must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Linear ramp from 0 to `lr0` over `warmup` steps, then half-cosine decay to 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup: usize, lr0: f64) -> f64 {
    if step < warmup {
        return lr0 * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr0;
    }
    let t = (step.min(total) - warmup) as f64 / (total - warmup) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Bias-corrected Adam over the trainable entries of a store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    /// One update with the gradients currently held by the store.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for p in store.iter_mut().filter(|p| p.kind == ParamKind::Trainable) {
            let n = p.value.len();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![T::zero(); n]);
            if m.len() != n || p.grad.len() != n {
                return Err(Error::shape(format!("adam state for {} does not match its shape", p.name)));
            }
            let grad = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i].as_f64();
                let mi = self.beta1 * m[i].as_f64() + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i].as_f64() + (1.0 - self.beta2) * g * g;
                m[i] = T::from_f64_lossy(mi);
                v[i] = T::from_f64_lossy(vi);
                let upd = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                *w = T::from_f64_lossy(w.as_f64() - upd);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

/// Accuracy overall and per expression kind.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub total: usize,
    pub per_kind: BTreeMap<Kind, KindMetrics>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KindMetrics {
    pub correct: usize,
    pub total: usize,
}

impl KindMetrics {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

impl EvalMetrics {
    pub fn kind_accuracy(&self, kind: Kind) -> Option<f64> {
        self.per_kind.get(&kind).map(KindMetrics::accuracy)
    }

    /// Metrics of a prediction list against the examples' targets.
    pub fn from_predictions(examples: &[Example], predictions: &[usize]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Input("cannot evaluate an empty dataset".into()));
        }
        let mut per_kind: BTreeMap<Kind, KindMetrics> = BTreeMap::new();
        let mut correct = 0;
        for (ex, &p) in examples.iter().zip(predictions) {
            let k = per_kind.entry(ex.kind).or_default();
            k.total += 1;
            if p == ex.target {
                k.correct += 1;
                correct += 1;
            }
        }
        Ok(Self { accuracy: correct as f64 / examples.len() as f64, total: examples.len(), per_kind })
    }
}

/// One JSONL line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_acc: f64,
    pub eval_acc_attr: Option<f64>,
    pub eval_acc_spatial: Option<f64>,
}

/// Inputs of one batch: rendered images, tokens and targets.
pub struct Batch {
    pub images: Tensor<f32>,
    pub tokens: TokenBatch,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn new(examples: &[&Example], vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let seqs = examples.iter().map(|e| vocab.tokenize(&e.expression)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            images: synth::render_batch(examples)?,
            tokens: TokenBatch::new(&seqs, max_len)?,
            targets: examples.iter().map(|e| e.target).collect(),
        })
    }
}

fn check_kinds(net: &LaConvNet, examples: &[Example]) -> Result<()> {
    let want_locate = net.cfg.head == HeadKind::Locate;
    match examples.iter().find(|e| e.kind.is_locate() != want_locate) {
        Some(e) => Err(Error::config(format!("a {:?} head cannot be trained on {} examples", net.cfg.head, e.kind))),
        None => Ok(()),
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mutable training state carried across epochs.
pub struct TrainState {
    pub adam: Adam<f32>,
    pub rng: ChaCha8Rng,
    /// Optimiser steps taken so far.
    pub step: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    /// Directory for a diagnostic dump when the loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, n_train: usize) -> Self {
        let spe = cfg.steps_per_epoch(n_train);
        Self {
            adam: Adam::new(cfg.beta1, cfg.beta2, cfg.eps),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
            total_steps: spe * cfg.epochs,
            warmup_steps: spe * cfg.warmup_epochs,
            dump_dir: None,
        }
    }
}

/// One shuffled pass over `data`. Returns the example-weighted mean loss and accuracy.
pub fn train_epoch(
    net: &LaConvNet,
    store: &mut ParamStore<f32>,
    data: &[Example],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    check_kinds(net, data)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut state.rng);
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let mut lr = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let examples: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
        let batch = Batch::new(&examples, vocab, net.cfg.text.max_len)?;
        store.zero_grad();
        let mut s = Session::new(store, true);
        let images = s.graph.constant(batch.images.clone());
        let logits = net.logits(&mut s, images, &batch.tokens)?;
        let loss = s.graph.cross_entropy(logits, &batch.targets)?;
        let loss_value = s.graph.value(loss)[0].as_f64();
        let n_cls = s.graph.shape(logits)[1];
        correct += s
            .graph
            .value(logits)
            .chunks(n_cls)
            .zip(&batch.targets)
            .filter(|(row, &t)| argmax(row) == t)
            .count();
        if !loss_value.is_finite() || s.graph.status().is_err() {
            dump_batch(state.dump_dir.as_deref(), state.step, &examples, loss_value);
            return Err(Error::NonFinite { op: format!("training loss at step {}", state.step) });
        }
        s.backward(loss)?;
        if cfg.clip > 0.0 {
            store.clip_grad_norm(cfg.clip);
        }
        lr = lr_schedule(state.step + 1, state.total_steps, state.warmup_steps, cfg.lr);
        state.adam.step(store, lr)?;
        state.step += 1;
        loss_sum += loss_value * examples.len() as f64;
    }
    store.zero_grad();
    Ok(EpochMetrics { loss: loss_sum / data.len() as f64, accuracy: correct as f64 / data.len() as f64, lr })
}

fn dump_batch(dir: Option<&Path>, step: usize, examples: &[&Example], loss: f64) {
    let records: Vec<&Example> = examples.to_vec();
    let body = serde_json::json!({ "step": step, "loss": loss.to_string(), "batch": records });
    log::error!("non-finite loss at step {step}; batch: {body}");
    if let Some(dir) = dir {
        let path = dir.join("nonfinite_batch.json");
        if let Err(e) = fs::write(&path, body.to_string()) {
            log::error!("could not write {}: {e}", path.display());
        }
    }
}

/// Predicted class per example, in eval mode. The store is not modified.
pub fn predict(net: &LaConvNet, store: &ParamStore<f32>, data: &[Example], vocab: &Vocabulary, batch_size: usize) -> Result<Vec<usize>> {
    let mut work = store.clone();
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let examples: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::new(&examples, vocab, net.cfg.text.max_len)?;
        let mut s = Session::new(&mut work, false);
        let images = s.graph.constant(batch.images);
        let logits = net.logits(&mut s, images, &batch.tokens)?;
        s.graph.status()?;
        let n_cls = s.graph.shape(logits)[1];
        out.extend(s.graph.value(logits).chunks(n_cls).map(argmax));
    }
    Ok(out)
}

pub fn evaluate(net: &LaConvNet, store: &ParamStore<f32>, data: &[Example], vocab: &Vocabulary, batch_size: usize) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    check_kinds(net, data)?;
    let preds = predict(net, store, data, vocab, batch_size)?;
    EvalMetrics::from_predictions(data, &preds)
}

/// What a checkpoint's metadata records about the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub net: NetConfig,
    pub vocab: Vocabulary,
    pub epoch: usize,
    pub eval_acc: f64,
}

pub fn save_model(path: &Path, store: &ParamStore<f32>, meta: &ModelMeta) -> Result<()> {
    Checkpoint::from_store(store, serde_json::to_value(meta)?).save(path)
}

/// Rebuilds the network described by a checkpoint and loads its values.
pub fn load_model(path: &Path) -> Result<(LaConvNet, ParamStore<f32>, ModelMeta)> {
    let ck = Checkpoint::load(path)?;
    let meta: ModelMeta = serde_json::from_value(ck.metadata.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    let net = LaConvNet::new(meta.net.clone(), meta.vocab.len())?;
    let mut store = net.init::<f32>(0)?;
    ck.load_into(&mut store)?;
    Ok((net, store, meta))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitReport {
    pub history: Vec<MetricsLine>,
    pub best_epoch: usize,
    pub best: EvalMetrics,
    pub last: EvalMetrics,
}

/// Full training run. With `out`, appends `metrics.jsonl` and writes
/// `epoch{e}.lckp` at each evaluation plus `best.lckp` by eval accuracy.
pub fn fit(
    net: &LaConvNet,
    store: &mut ParamStore<f32>,
    train: &[Example],
    test: &[Example],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<FitReport> {
    cfg.validate()?;
    check_kinds(net, train)?;
    check_kinds(net, test)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let metrics = dir.join("metrics.jsonl");
        if metrics.exists() {
            fs::remove_file(&metrics)?;
        }
    }
    let mut state = TrainState::new(cfg, train.len());
    state.dump_dir = out.map(Path::to_path_buf);
    let mut history = Vec::new();
    let mut best: Option<(usize, EvalMetrics)> = None;
    let mut last = EvalMetrics::default();
    for epoch in 1..=cfg.epochs {
        let m = train_epoch(net, store, train, vocab, cfg, &mut state)?;
        if epoch % cfg.eval_interval != 0 && epoch != cfg.epochs {
            log::info!("epoch {epoch}: loss {:.4} train acc {:.4} lr {:.3e}", m.loss, m.accuracy, m.lr);
            continue;
        }
        let ev = evaluate(net, store, test, vocab, cfg.batch_size)?;
        let line = MetricsLine {
            epoch,
            lr: m.lr,
            train_loss: m.loss,
            eval_acc: ev.accuracy,
            eval_acc_attr: ev.kind_accuracy(Kind::Attribute),
            eval_acc_spatial: ev.kind_accuracy(Kind::Spatial),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train acc {:.4} eval acc {:.4} lr {:.3e}",
            m.loss,
            m.accuracy,
            ev.accuracy,
            m.lr
        );
        let improved = best.as_ref().map_or(true, |(_, b)| ev.accuracy > b.accuracy);
        if let Some(dir) = out {
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(&line)?)?;
            let meta = ModelMeta { net: net.cfg.clone(), vocab: vocab.clone(), epoch, eval_acc: ev.accuracy };
            save_model(&dir.join(format!("epoch{epoch}.lckp")), store, &meta)?;
            if improved {
                save_model(&dir.join("best.lckp"), store, &meta)?;
            }
        }
        if improved {
            best = Some((epoch, ev.clone()));
        }
        history.push(line);
        last = ev;
    }
    let (best_epoch, best) = best.expect("the last epoch is always evaluated");
    Ok(FitReport { history, best_epoch, best, last })
}
