//! AdamW training and evaluation of [`LightResKan`] models, checkpoints and
//! feature export.
//!
//! Every random stream of a run derives from `TrainConfig::seed`: epoch `e`
//! shuffles with `(seed, "train.shuffle", e)` and batch `b` of that epoch
//! draws dropout masks from `(seed, "train.dropout", e * 2^32 + b)`. A run
//! resumed from a checkpoint therefore replays the same streams as an
//! uninterrupted one.

mod checkpoint;
mod metrics;
mod optim;

pub use checkpoint::{Checkpoint, NamedTensor, TensorRole, MAGIC, VERSION};
pub use metrics::{argmax, centroid_separation, Metrics};
pub use optim::{AdamW, AdamWConfig};

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use reskan_tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, Batch, Dataset};
use crate::error::{config_err, Error, Result};
use crate::network::{build, LightResKan, NetworkConfig};
use crate::seed::{derive_rng, derive_seed};
use crate::speckle::{sample_field, GammaNoiseSpec};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Evaluate on the test split every this many epochs (and after the
    /// last one).
    pub eval_every: usize,
    /// Save a checkpoint every this many epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub eval_batch_size: usize,
    pub drop_last: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = AdamWConfig::default();
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            eval_every: 1,
            checkpoint_every: 10,
            eval_batch_size: 64,
            drop_last: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        if self.batch_size == 0 {
            return Err(config_err!("train.batch_size must be positive"));
        }
        if self.eval_batch_size == 0 {
            return Err(config_err!("train.eval_batch_size must be positive"));
        }
        if self.eval_every == 0 {
            return Err(config_err!("train.eval_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    /// Present on evaluation epochs.
    pub test_acc: Option<f64>,
}

impl EpochMetrics {
    pub fn csv_line(&self) -> String {
        let acc = self.test_acc.map(|a| a.to_string()).unwrap_or_default();
        format!("{},{},{}", self.epoch, self.train_loss, acc)
    }
}

pub const METRICS_HEADER: &str = "epoch,train_loss,test_acc";

/// Speckle applied to test images before classification; image `i` of the
/// evaluated set uses the stream `(seed, "eval.noise", i)`. The product is
/// not clipped, so heavy-tailed fields keep their full variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalNoise {
    pub spec: GammaNoiseSpec,
    pub seed: u64,
}

fn add_noise(batch: &mut Batch, noise: &EvalNoise) -> Result<()> {
    let [_, _, h, w] = batch.images.dims4()?;
    let plane = h * w;
    for (k, &idx) in batch.indices.iter().enumerate() {
        let field = sample_field::<f32>(&[1, 1, h, w], &noise.spec, derive_seed(noise.seed, "eval.noise", idx as u64))?;
        let px = &mut batch.images.data_mut()[k * plane..(k + 1) * plane];
        for (p, &f) in px.iter_mut().zip(field.tensor().data()) {
            *p *= f;
        }
    }
    Ok(())
}

/// Classifies `data` in order with `classify`, which maps a batch to
/// logits `[N, K]`.
pub fn evaluate_with(
    data: &Dataset,
    batch_size: usize,
    noise: Option<&EvalNoise>,
    mut classify: impl FnMut(&Batch) -> Result<Tensor<f32>>,
) -> Result<Metrics> {
    let k = data.num_classes();
    let mut preds = Vec::with_capacity(data.len());
    for mut batch in batch_iter(data, batch_size, None, false)? {
        if let Some(n) = noise {
            add_noise(&mut batch, n)?;
        }
        let logits = classify(&batch)?;
        if logits.shape() != [batch.labels.len(), k] {
            return Err(Error::Runtime(format!("classifier returned {:?}, expected [{}, {k}]", logits.shape(), batch.labels.len())));
        }
        preds.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(Metrics::from_predictions(&preds, &data.labels(), k))
}

/// Eval-mode accuracy and confusion matrix.
pub fn evaluate(model: &LightResKan<f32>, data: &Dataset, batch_size: usize, noise: Option<&EvalNoise>) -> Result<Metrics> {
    if model.config.num_classes != data.num_classes() {
        return Err(config_err!(
            "model has {} classes but the dataset has {}",
            model.config.num_classes,
            data.num_classes()
        ));
    }
    evaluate_with(data, batch_size, noise, |b| model.logits(&b.images))
}

/// Eval-mode mean cross-entropy over `data`.
pub fn evaluate_loss(model: &LightResKan<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for batch in batch_iter(data, batch_size, None, false)? {
        let mut g = Graph::new();
        let x = g.input(batch.images);
        let out = model.forward(&mut g, x, None)?;
        let loss = g.softmax_cross_entropy(out.logits, &batch.labels)?;
        total += g.value(loss).item()? as f64 * batch.labels.len() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Eval-mode pooled features, one row per sample in dataset order.
pub fn features(model: &LightResKan<f32>, data: &Dataset, batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let dim = model.config.feature_dim();
    let mut out = Vec::with_capacity(data.len());
    for batch in batch_iter(data, batch_size, None, false)? {
        let f = model.extract_features(&batch.images)?;
        out.extend(f.data().chunks(dim).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Writes `sample_id,label,f_0..f_{dim-1}`.
pub fn export_features(model: &LightResKan<f32>, data: &Dataset, path: &Path, batch_size: usize) -> Result<()> {
    let feats = features(model, data, batch_size)?;
    let dim = model.config.feature_dim();
    let csv_err = |e: csv::Error| Error::Runtime(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["sample_id".to_string(), "label".to_string()];
    header.extend((0..dim).map(|i| format!("f_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (s, f) in data.samples.iter().zip(&feats) {
        let mut row = vec![s.id.clone(), s.label.to_string()];
        row.extend(f.iter().map(f32::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_test_acc: f64,
    pub best_test_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub final_train_loss: Option<f64>,
    pub confusion: Vec<Vec<usize>>,
}

pub struct Trainer {
    pub model: LightResKan<f32>,
    pub optimizer: AdamW<f32>,
    pub config: TrainConfig,
    pub model_seed: u64,
    pub history: Vec<EpochMetrics>,
    pub completed_epochs: usize,
}

impl Trainer {
    pub fn new(model: LightResKan<f32>, model_seed: u64, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.optimizer(), &model.store);
        Ok(Trainer { model, optimizer, config, model_seed, history: Vec::new(), completed_epochs: 0 })
    }

    /// Builds a fresh model and trainer from configs.
    pub fn build(network: &NetworkConfig, model_seed: u64, config: TrainConfig) -> Result<Self> {
        Self::new(build(network, model_seed)?, model_seed, config)
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        let store = &self.model.store;
        let mut tensors = Vec::new();
        for (_, p) in store.iter() {
            tensors.push(NamedTensor { name: p.name.clone(), role: TensorRole::Param, value: p.value.clone() });
        }
        for (_, b) in store.buffers() {
            tensors.push(NamedTensor { name: b.name.clone(), role: TensorRole::Buffer, value: b.value.clone() });
        }
        for ((_, p), (m, v)) in store.iter().zip(self.optimizer.m.iter().zip(&self.optimizer.v)) {
            tensors.push(NamedTensor { name: p.name.clone(), role: TensorRole::AdamM, value: m.clone() });
            tensors.push(NamedTensor { name: p.name.clone(), role: TensorRole::AdamV, value: v.clone() });
        }
        Checkpoint {
            network: self.model.config.clone(),
            train: self.config.clone(),
            model_seed: self.model_seed,
            completed_epochs: self.completed_epochs,
            optimizer_step: self.optimizer.step,
            history: self.history.clone(),
            tensors,
        }
    }

    /// Rebuilds the model and optimizer and overwrites every tensor by
    /// name; a missing or misshapen tensor is an integrity error.
    pub fn from_checkpoint(ckpt: &Checkpoint<f32>) -> Result<Self> {
        let mut t = Self::build(&ckpt.network, ckpt.model_seed, ckpt.train.clone())?;
        let find = |role: TensorRole, name: &str| {
            ckpt.tensors
                .iter()
                .find(|n| n.role == role && n.name == name)
                .map(|n| &n.value)
                .ok_or_else(|| Error::Integrity(format!("checkpoint lacks {role:?} tensor {name}")))
        };
        let fit = |dst: &mut Tensor<f32>, src: &Tensor<f32>, name: &str| {
            if dst.shape() != src.shape() {
                return Err(Error::Integrity(format!("tensor {name} has shape {:?}, expected {:?}", src.shape(), dst.shape())));
            }
            *dst = src.clone();
            Ok(())
        };
        let names: Vec<String> = t.model.store.iter().map(|(_, p)| p.name.clone()).collect();
        for (i, (p, name)) in t.model.store.iter_mut().zip(&names).enumerate() {
            fit(&mut p.value, find(TensorRole::Param, name)?, name)?;
            fit(&mut t.optimizer.m[i], find(TensorRole::AdamM, name)?, name)?;
            fit(&mut t.optimizer.v[i], find(TensorRole::AdamV, name)?, name)?;
        }
        for b in t.model.store.buffers_mut() {
            let src = find(TensorRole::Buffer, &b.name)?;
            fit(&mut b.value, src, &b.name.clone())?;
        }
        t.optimizer.step = ckpt.optimizer_step;
        t.history = ckpt.history.clone();
        t.completed_epochs = ckpt.completed_epochs;
        Ok(t)
    }

    /// One pass over `data`; returns the sample-weighted mean loss.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<f64> {
        let epoch = self.completed_epochs as u64;
        let seed = self.config.seed;
        let batches = batch_iter(data, self.config.batch_size, Some(derive_seed(seed, "train.shuffle", epoch)), self.config.drop_last)?;
        let (mut total, mut count) = (0.0, 0usize);
        for (b, batch) in batches.enumerate() {
            let mut rng = derive_rng(seed, "train.dropout", (epoch << 32) + b as u64);
            self.model.store.zero_grad();
            let mut g = Graph::new();
            let x = g.input(batch.images);
            let out = self.model.forward(&mut g, x, Some(&mut rng))?;
            let loss = g.softmax_cross_entropy(out.logits, &batch.labels)?;
            let lv = g.value(loss).item()? as f64;
            if !lv.is_finite() {
                return Err(Error::Training(format!("loss became {lv} at epoch {} batch {b}", epoch + 1)));
            }
            g.backward_into(loss, &mut self.model.store)?;
            self.optimizer.step(&mut self.model.store)?;
            self.model.apply_bn_updates(&out.bn_updates);
            total += lv * batch.labels.len() as f64;
            count += batch.labels.len();
        }
        self.completed_epochs += 1;
        Ok(total / count.max(1) as f64)
    }

    /// Trains from the current epoch up to `config.epochs`, then evaluates.
    /// With `out_dir`, metrics, checkpoints and a summary are written
    /// there; a non-finite loss aborts and leaves the last good checkpoint
    /// in place.
    pub fn fit(&mut self, train: &Dataset, test: &Dataset, out_dir: Option<&Path>) -> Result<TrainSummary> {
        self.fit_with(train, test, out_dir, |_| {})
    }

    /// [`Trainer::fit`] that reports every finished epoch to `on_epoch`.
    pub fn fit_with(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<TrainSummary> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let mut log = out_dir.map(|d| MetricsLog::create(&d.join(METRICS_FILE), &self.history)).transpose()?;
        let eb = self.config.eval_batch_size;
        while self.completed_epochs < self.config.epochs {
            let train_loss = self.train_epoch(train)?;
            let epoch = self.completed_epochs;
            let last = epoch == self.config.epochs;
            let test_acc = if epoch % self.config.eval_every == 0 || last {
                Some(evaluate(&self.model, test, eb, None)?.accuracy)
            } else {
                None
            };
            let m = EpochMetrics { epoch, train_loss, test_acc };
            if let Some(log) = log.as_mut() {
                log.append(&m)?;
            }
            on_epoch(&m);
            self.history.push(m);
            let every = self.config.checkpoint_every;
            if let Some(dir) = out_dir {
                if last || (every > 0 && epoch % every == 0) {
                    self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
        let final_metrics = evaluate(&self.model, test, eb, None)?;
        let best = self
            .history
            .iter()
            .filter_map(|m| m.test_acc.map(|a| (m.epoch, a)))
            .fold(None, |acc: Option<(usize, f64)>, (e, a)| match acc {
                Some((_, b)) if b >= a => acc,
                _ => Some((e, a)),
            });
        let summary = TrainSummary {
            epochs: self.completed_epochs,
            final_test_acc: final_metrics.accuracy,
            best_test_acc: best.map(|b| b.1),
            best_epoch: best.map(|b| b.0),
            final_train_loss: self.history.last().map(|m| m.train_loss),
            confusion: final_metrics.confusion,
        };
        if let Some(dir) = out_dir {
            let path = dir.join(SUMMARY_FILE);
            let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Runtime(e.to_string()))?;
            fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        }
        Ok(summary)
    }
}

/// Append-only `epoch,train_loss,test_acc` file. Creating it rewrites the
/// rows already in the history, so a resumed run never duplicates epochs.
struct MetricsLog {
    path: PathBuf,
    file: File,
}

impl MetricsLog {
    fn create(path: &Path, history: &[EpochMetrics]) -> Result<Self> {
        let mut text = format!("{METRICS_HEADER}\n");
        for m in history {
            text.push_str(&m.csv_line());
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { path: path.to_path_buf(), file })
    }

    fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.file, "{}", m.csv_line()).map_err(|e| Error::io(&self.path, e))
    }
}
