//! Training protocol: Adam over the head's trainable blocks, categorical
//! cross-entropy, per-epoch history, and loss-improvement checkpointing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ingest::{DatasetManifest, Her2Score, Split, StainModality, NUM_CLASSES};
use crate::model::{
    batch_accuracy, mean_cross_entropy, save_checkpoint, CheckpointSidecar, FeatureStore, Head,
    HeadGradients, ModelHandle,
};
use crate::preprocess::{make_batches, one_hot, AugmentPolicy};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    TrainLoss,
    ValLoss,
}

impl Monitor {
    pub fn as_str(self) -> &'static str {
        match self {
            Monitor::TrainLoss => "train_loss",
            Monitor::ValLoss => "val_loss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train_loss" => Some(Monitor::TrainLoss),
            "val_loss" => Some(Monitor::ValLoss),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub checkpoint_monitor: Monitor,
    pub modality: Option<StainModality>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 256,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-7,
            seed: 0,
            checkpoint_monitor: Monitor::ValLoss,
            modality: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::BadConfigValue {
                key: "learning_rate".into(),
                value: self.learning_rate.to_string(),
            });
        }
        if self.batch_size < 1 {
            return Err(Error::BadConfigValue {
                key: "batch_size".into(),
                value: self.batch_size.to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_monitored_loss: Option<f64>,
}

impl TrainHistory {
    /// One structured record per epoch, newline-delimited.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("metrics serialize"));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut history = TrainHistory::default();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let e: EpochMetrics = serde_json::from_str(line)
                .map_err(|err| Error::MalformedManifest(format!("history line: {err}")))?;
            history.epochs.push(e);
        }
        history.recompute_best(Monitor::ValLoss);
        Ok(history)
    }

    fn recompute_best(&mut self, monitor: Monitor) {
        self.best_epoch = None;
        self.best_monitored_loss = None;
        for e in &self.epochs {
            let loss = match monitor {
                Monitor::TrainLoss => e.train_loss,
                Monitor::ValLoss => e.val_loss.unwrap_or(e.train_loss),
            };
            if self.best_monitored_loss.map_or(true, |b| loss < b) {
                self.best_monitored_loss = Some(loss);
                self.best_epoch = Some(e.epoch);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub path: PathBuf,
    pub epoch: usize,
    pub monitored_loss: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub best: Option<CheckpointMeta>,
    /// Every checkpoint written, in write order (strictly improving loss).
    pub checkpoints: Vec<CheckpointMeta>,
}

/// Adam optimizer over the head's trainable blocks.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    state: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Self {
        Adam {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            t: 0,
            state: Vec::new(),
        }
    }

    pub fn step(&mut self, head: &mut Head, grads: &HeadGradients) {
        self.t += 1;
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let state = &mut self.state;
        head.update_blocks(grads, |block, params, g| {
            if state.len() <= block {
                state.resize(block + 1, (Vec::new(), Vec::new()));
            }
            let (m, v) = &mut state[block];
            if m.is_empty() {
                *m = vec![0.0; params.len()];
                *v = vec![0.0; params.len()];
            }
            for k in 0..params.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                params[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

/// Core fitting loop shared by the image path and the cached-feature path.
///
/// `train_batches(epoch)` yields that epoch's (features, targets) batches;
/// `val_eval(head)` returns infer-mode (loss, accuracy) for the monitored
/// split, or None when there is no validation data.
pub fn fit_head<F, G>(
    head: &mut Head,
    config: &TrainConfig,
    mut train_batches: F,
    mut val_eval: G,
    checkpoint_path: Option<&Path>,
    config_hash: &str,
) -> Result<TrainOutcome>
where
    F: FnMut(usize) -> Result<Vec<(Array2<f64>, Array2<f64>)>>,
    G: FnMut(&Head) -> Result<Option<(f64, f64)>>,
{
    config.validate()?;
    let mut adam = Adam::new(config);
    let mut outcome = TrainOutcome::default();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut correct_weight = 0.0;
        let mut n_total = 0usize;
        for (features, targets) in train_batches(epoch)? {
            let n = features.nrows();
            let (probs, cache) = head.train_forward(&features)?;
            let loss = mean_cross_entropy(&probs, &targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(epoch));
            }
            loss_sum += loss * n as f64;
            correct_weight += batch_accuracy(&probs, &targets) * n as f64;
            let grads = head.backward(&cache, &targets)?;
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss(epoch));
            }
            head.update_running_stats(&cache);
            adam.step(head, &grads);
            n_total += n;
        }
        if n_total == 0 {
            return Err(Error::EmptySplit("train".into()));
        }
        let train_loss = loss_sum / n_total as f64;
        let train_accuracy = correct_weight / n_total as f64;
        let val = val_eval(head)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss,
            train_accuracy,
            val_loss: val.map(|(l, _)| l),
            val_accuracy: val.map(|(_, a)| a),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        let monitored = match config.checkpoint_monitor {
            Monitor::TrainLoss => train_loss,
            Monitor::ValLoss => metrics.val_loss.unwrap_or(train_loss),
        };
        if !monitored.is_finite() {
            return Err(Error::NonFiniteLoss(epoch));
        }
        let improved = outcome.history.best_monitored_loss.map_or(true, |b| monitored < b);
        outcome.history.epochs.push(metrics);
        if improved {
            outcome.history.best_monitored_loss = Some(monitored);
            outcome.history.best_epoch = Some(epoch);
            let path = checkpoint_path.map(Path::to_path_buf).unwrap_or_default();
            if let Some(p) = checkpoint_path {
                let sidecar = CheckpointSidecar {
                    epoch,
                    monitored_loss: monitored,
                    config_hash: config_hash.to_string(),
                    modality: config
                        .modality
                        .map(|m| m.as_str().to_string())
                        .unwrap_or_else(|| "unspecified".into()),
                    created_at: now_utc(),
                };
                save_checkpoint(head, p, &sidecar)?;
            }
            let meta = CheckpointMeta {
                path,
                epoch,
                monitored_loss: monitored,
                config_hash: config_hash.to_string(),
            };
            outcome.checkpoints.push(meta.clone());
            outcome.best = Some(meta);
        }
    }
    Ok(outcome)
}

fn now_utc() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

fn labels_to_targets(scores: &[Her2Score]) -> Array2<f64> {
    let mut t = Array2::<f64>::zeros((scores.len(), NUM_CLASSES));
    for (i, s) in scores.iter().enumerate() {
        t.row_mut(i)
            .iter_mut()
            .zip(one_hot(*s).iter())
            .for_each(|(dst, &src)| *dst = src as f64);
    }
    t
}

/// Train the head end-to-end from images: per-epoch shuffled, optionally
/// augmented batches through the frozen backbone.
pub fn train(
    handle: &mut ModelHandle,
    train_manifest: &DatasetManifest,
    val_manifest: Option<&DatasetManifest>,
    config: &TrainConfig,
    policy: Option<AugmentPolicy>,
    checkpoint_path: Option<&Path>,
    config_hash: &str,
) -> Result<TrainOutcome> {
    let backbone = handle.backbone.clone();
    let feature_dim = backbone.feature_dim();
    let val_data: Option<(Array2<f64>, Array2<f64>)> = match val_manifest {
        Some(m) if !m.records_in(Split::Test).is_empty() => {
            let mut feats = Vec::new();
            let mut targets = Vec::new();
            for batch in make_batches(m, Split::Test, config.batch_size, None, None)? {
                let batch = batch?;
                feats.push(backbone.extract(&batch.images)?);
                targets.push(batch.labels.mapv(f64::from));
            }
            Some((vstack(&feats, feature_dim)?, vstack(&targets, NUM_CLASSES)?))
        }
        _ => None,
    };
    let head = &mut handle.head;
    fit_head(
        head,
        config,
        |epoch| {
            let mut out = Vec::new();
            let stream = make_batches(
                train_manifest,
                Split::Train,
                config.batch_size,
                Some(config.seed + epoch as u64),
                policy.clone(),
            )?;
            for batch in stream {
                let batch = batch?;
                out.push((backbone.extract(&batch.images)?, batch.labels.mapv(f64::from)));
            }
            Ok(out)
        },
        |head| match &val_data {
            Some((x, t)) => {
                let probs = head.infer(x)?;
                Ok(Some((mean_cross_entropy(&probs, t)?, batch_accuracy(&probs, t))))
            }
            None => Ok(None),
        },
        checkpoint_path,
        config_hash,
    )
}

fn vstack(parts: &[Array2<f64>], ncols: usize) -> Result<Array2<f64>> {
    let n: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Array2::<f64>::zeros((n, ncols));
    let mut row = 0;
    for p in parts {
        out.slice_mut(ndarray::s![row..row + p.nrows(), ..]).assign(p);
        row += p.nrows();
    }
    Ok(out)
}

/// Labeled sample referencing a cached feature row.
pub type LabeledSample = (String, Her2Score);

pub fn labeled_samples(manifest: &DatasetManifest, split: Split) -> Vec<LabeledSample> {
    manifest
        .records_in(split)
        .iter()
        .map(|r| (r.sample_id.clone(), r.score))
        .collect()
}

/// Train the head from precomputed backbone features. Same loss, optimizer,
/// and checkpoint policy as [`train`], with the forward pass starting at the
/// head. Augmentation does not apply on this path.
pub fn train_on_cached_features(
    head: &mut Head,
    store: &FeatureStore,
    train_samples: &[LabeledSample],
    val_samples: Option<&[LabeledSample]>,
    config: &TrainConfig,
    checkpoint_path: Option<&Path>,
    config_hash: &str,
) -> Result<TrainOutcome> {
    if train_samples.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    for (id, _) in train_samples.iter().chain(val_samples.unwrap_or(&[])) {
        if !store.contains(id) {
            return Err(Error::MissingFeature(id.clone()));
        }
    }
    let val_data = match val_samples {
        Some(samples) if !samples.is_empty() => {
            let ids: Vec<String> = samples.iter().map(|(id, _)| id.clone()).collect();
            let scores: Vec<Her2Score> = samples.iter().map(|(_, s)| *s).collect();
            Some((store.gather(&ids)?, labels_to_targets(&scores)))
        }
        _ => None,
    };
    fit_head(
        head,
        config,
        |epoch| {
            let mut order: Vec<usize> = (0..train_samples.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed + epoch as u64);
            order.shuffle(&mut rng);
            let mut out = Vec::new();
            for chunk in order.chunks(config.batch_size) {
                let ids: Vec<String> =
                    chunk.iter().map(|&i| train_samples[i].0.clone()).collect();
                let scores: Vec<Her2Score> =
                    chunk.iter().map(|&i| train_samples[i].1).collect();
                out.push((store.gather(&ids)?, labels_to_targets(&scores)));
            }
            Ok(out)
        },
        |head| match &val_data {
            Some((x, t)) => {
                let probs = head.infer(x)?;
                Ok(Some((mean_cross_entropy(&probs, t)?, batch_accuracy(&probs, t))))
            }
            None => Ok(None),
        },
        checkpoint_path,
        config_hash,
    )
}

/// One evaluated sample: id, true index, predicted index, probability row.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PredictionRow {
    pub sample_id: String,
    pub true_index: usize,
    pub predicted_index: usize,
    pub probabilities: Vec<f64>,
}

/// Infer-mode predictions over one split, in manifest order.
pub fn predict_split(
    handle: &ModelHandle,
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
) -> Result<Vec<PredictionRow>> {
    let mut rows = Vec::new();
    for batch in make_batches(manifest, split, batch_size, None, None)? {
        let batch = batch?;
        let probs = handle.head.infer(&handle.extract_features(&batch)?)?;
        for (i, id) in batch.record_ids.iter().enumerate() {
            let p: Vec<f64> = probs.row(i).to_vec();
            let t: Vec<f64> = batch.labels.row(i).iter().map(|&v| v as f64).collect();
            rows.push(PredictionRow {
                sample_id: id.clone(),
                true_index: crate::model::argmax(&t),
                predicted_index: crate::model::argmax(&p),
                probabilities: p,
            });
        }
    }
    Ok(rows)
}

/// Mean infer-mode loss and argmax accuracy over one split.
pub fn evaluate_split(
    handle: &ModelHandle,
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0.0;
    let mut n = 0usize;
    for batch in make_batches(manifest, split, batch_size, None, None)? {
        let batch = batch?;
        let targets = batch.labels.mapv(f64::from);
        let probs = handle.head.infer(&handle.extract_features(&batch)?)?;
        loss_sum += mean_cross_entropy(&probs, &targets)? * batch.len() as f64;
        correct += batch_accuracy(&probs, &targets) * batch.len() as f64;
        n += batch.len();
    }
    Ok((loss_sum / n as f64, correct / n as f64))
}
