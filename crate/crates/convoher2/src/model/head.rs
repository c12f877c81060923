//! The trainable classifier head: batch-norm + dense stages with hand-rolled
//! forward and backward passes in f64.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{HeadSpec, LayerSpec};
use crate::oracle::{DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM, LOSS_CLIP};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    fn new(dim: usize) -> Self {
        BatchNormLayer {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            epsilon: DEFAULT_BN_EPSILON,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// Weight matrix, input-dim x output-dim.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub bn: BatchNormLayer,
    pub dense: DenseLayer,
    pub activation: Activation,
}

/// Realized head parameters in stage order.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub spec: HeadSpec,
    pub stages: Vec<Stage>,
}

struct StageCache {
    /// Stage input (n x d_in).
    x: Array2<f64>,
    /// Normalized input before scale/shift.
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    mu: Array1<f64>,
    var: Array1<f64>,
    /// Dense input (gamma*xhat + beta).
    bn_out: Array2<f64>,
    /// Activation output (next stage's input, or probabilities).
    out: Array2<f64>,
}

/// Intermediate activations of one train-mode forward pass.
pub struct HeadCache {
    stages: Vec<StageCache>,
}

/// Gradients for every trainable block, mirroring the stage layout.
#[derive(Debug, Clone)]
pub struct HeadGradients {
    pub stages: Vec<StageGradients>,
}

#[derive(Debug, Clone)]
pub struct StageGradients {
    pub dgamma: Array1<f64>,
    pub dbeta: Array1<f64>,
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

impl HeadGradients {
    pub fn for_each_block(&self, mut f: impl FnMut(String, &[f64])) {
        for (i, g) in self.stages.iter().enumerate() {
            f(format!("stage{i}.gamma"), g.dgamma.as_slice().unwrap());
            f(format!("stage{i}.beta"), g.dbeta.as_slice().unwrap());
            f(format!("stage{i}.w"), g.dw.as_slice().unwrap());
            f(format!("stage{i}.b"), g.db.as_slice().unwrap());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.stages.iter().all(|g| {
            g.dgamma.iter().all(|v| v.is_finite())
                && g.dbeta.iter().all(|v| v.is_finite())
                && g.dw.iter().all(|v| v.is_finite())
                && g.db.iter().all(|v| v.is_finite())
        })
    }
}

/// One flat exported array for cross-checking against the oracle path.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Head {
    /// Seeded initialization: fan-average uniform dense weights, zero biases,
    /// BN gamma 1 / beta 0 with unit running variance.
    pub fn init(spec: HeadSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut pending_bn: Option<BatchNormLayer> = None;
        for layer in &spec.layers {
            match layer {
                LayerSpec::BatchNorm { dim } => pending_bn = Some(BatchNormLayer::new(*dim)),
                LayerSpec::Dense { input, output, activation } => {
                    let limit = (6.0 / (*input + *output) as f64).sqrt();
                    let w = Array2::from_shape_fn((*input, *output), |_| {
                        rng.gen_range(-limit..limit)
                    });
                    stages.push(Stage {
                        bn: pending_bn.take().unwrap_or_else(|| BatchNormLayer::new(*input)),
                        dense: DenseLayer { w, b: Array1::zeros(*output) },
                        activation: *activation,
                    });
                }
            }
        }
        Head { spec, stages }
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "head expects {} features, got {}",
                self.spec.input_dim,
                x.ncols()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        Ok(())
    }

    /// Inference-mode forward using running statistics; pure and
    /// batch-size independent.
    pub fn infer(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for stage in &self.stages {
            let bn = &stage.bn;
            let inv_std = bn.running_var.mapv(|v| 1.0 / (v + bn.epsilon).sqrt());
            let mut h = cur.clone();
            for mut row in h.rows_mut() {
                row.zip_mut_with(&bn.running_mean, |v, &m| *v -= m);
                row.zip_mut_with(&inv_std, |v, &s| *v *= s);
                row.zip_mut_with(&bn.gamma, |v, &g| *v *= g);
                row.zip_mut_with(&bn.beta, |v, &b| *v += b);
            }
            let z = h.dot(&stage.dense.w) + &stage.dense.b;
            cur = apply_activation(z, stage.activation);
        }
        Ok(cur)
    }

    /// Train-mode forward using batch statistics. Pure: running statistics
    /// are not touched; apply [`Head::update_running_stats`] with the
    /// returned cache to commit them.
    pub fn train_forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, HeadCache)> {
        self.check_input(x)?;
        let n = x.nrows() as f64;
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let bn = &stage.bn;
            let mu = cur.mean_axis(Axis(0)).unwrap();
            let var = cur
                .rows()
                .into_iter()
                .fold(Array1::<f64>::zeros(cur.ncols()), |mut acc, row| {
                    acc.zip_mut_with(&(&row.to_owned() - &mu).mapv(|d| d * d), |a, &d| *a += d);
                    acc
                })
                / n;
            let inv_std = var.mapv(|v| 1.0 / (v + bn.epsilon).sqrt());
            let mut xhat = cur.clone();
            for mut row in xhat.rows_mut() {
                row.zip_mut_with(&mu, |v, &m| *v -= m);
                row.zip_mut_with(&inv_std, |v, &s| *v *= s);
            }
            let mut bn_out = xhat.clone();
            for mut row in bn_out.rows_mut() {
                row.zip_mut_with(&bn.gamma, |v, &g| *v *= g);
                row.zip_mut_with(&bn.beta, |v, &b| *v += b);
            }
            let z = bn_out.dot(&stage.dense.w) + &stage.dense.b;
            let out = apply_activation(z, stage.activation);
            caches.push(StageCache {
                x: cur,
                xhat,
                inv_std,
                mu,
                var,
                bn_out,
                out: out.clone(),
            });
            cur = out;
        }
        Ok((cur, HeadCache { stages: caches }))
    }

    /// Commit the running-statistics update for one train-mode pass.
    pub fn update_running_stats(&mut self, cache: &HeadCache) {
        for (stage, c) in self.stages.iter_mut().zip(&cache.stages) {
            let m = stage.bn.momentum;
            stage.bn.running_mean = &stage.bn.running_mean * m + &c.mu * (1.0 - m);
            stage.bn.running_var = &stage.bn.running_var * m + &c.var * (1.0 - m);
        }
    }

    /// Backpropagate the mean categorical cross-entropy through the cached
    /// forward pass. Returns gradients for every trainable block.
    pub fn backward(&self, cache: &HeadCache, targets: &Array2<f64>) -> Result<HeadGradients> {
        let last = cache.stages.last().expect("non-empty head");
        if targets.dim() != last.out.dim() {
            return Err(Error::ShapeMismatch(format!(
                "targets {:?} vs probabilities {:?}",
                targets.dim(),
                last.out.dim()
            )));
        }
        let n = last.out.nrows() as f64;
        // d(mean CE)/d(logits) of softmax output: (p - t)/n.
        let mut delta = (&last.out - targets) / n;
        let mut grads = vec![None; self.stages.len()];
        for (i, (stage, c)) in self.stages.iter().zip(&cache.stages).enumerate().rev() {
            // delta is dLoss/dz for this stage's dense output.
            let dw = c.bn_out.t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            let d_bn_out = delta.dot(&stage.dense.w.t());
            // BN backward (batch statistics).
            let mut dgamma = Array1::<f64>::zeros(c.xhat.ncols());
            let mut dbeta = Array1::<f64>::zeros(c.xhat.ncols());
            for (drow, xrow) in d_bn_out.rows().into_iter().zip(c.xhat.rows()) {
                dbeta.zip_mut_with(&drow.to_owned(), |a, &d| *a += d);
                dgamma.zip_mut_with(&(&drow.to_owned() * &xrow.to_owned()), |a, &d| *a += d);
            }
            let m = c.x.nrows() as f64;
            // dxhat = d_bn_out * gamma
            let mut dxhat = d_bn_out;
            for mut row in dxhat.rows_mut() {
                row.zip_mut_with(&stage.bn.gamma, |v, &g| *v *= g);
            }
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = {
                let mut acc = Array1::<f64>::zeros(dxhat.ncols());
                for (drow, xrow) in dxhat.rows().into_iter().zip(c.xhat.rows()) {
                    acc.zip_mut_with(&(&drow.to_owned() * &xrow.to_owned()), |a, &d| *a += d);
                }
                acc
            };
            let mut dx = dxhat * m;
            for mut row in dx.rows_mut() {
                row.zip_mut_with(&sum_dxhat, |v, &s| *v -= s);
            }
            for (mut row, xrow) in dx.rows_mut().into_iter().zip(c.xhat.rows()) {
                row.zip_mut_with(&(&xrow.to_owned() * &sum_dxhat_xhat), |v, &s| *v -= s);
            }
            for mut row in dx.rows_mut() {
                row.zip_mut_with(&c.inv_std, |v, &s| *v *= s / m);
            }
            grads[i] = Some(StageGradients { dgamma, dbeta, dw, db });
            if i > 0 {
                // through the previous stage's ReLU.
                let prev_out = &cache.stages[i - 1].out;
                delta = dx;
                delta.zip_mut_with(prev_out, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
        }
        Ok(HeadGradients { stages: grads.into_iter().map(Option::unwrap).collect() })
    }

    /// Trainable blocks in fixed order (per stage: gamma, beta, w, b).
    pub fn trainable_blocks(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{i}.gamma"), s.bn.gamma.to_vec()));
            out.push((format!("stage{i}.beta"), s.bn.beta.to_vec()));
            out.push((format!("stage{i}.w"), s.dense.w.iter().cloned().collect()));
            out.push((format!("stage{i}.b"), s.dense.b.to_vec()));
        }
        out
    }

    /// Overwrite one trainable block from a flat slice.
    pub fn set_block(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let (stage_part, field) = name
            .split_once('.')
            .ok_or_else(|| Error::ShapeMismatch(format!("bad block name {name:?}")))?;
        let idx: usize = stage_part
            .strip_prefix("stage")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::ShapeMismatch(format!("bad block name {name:?}")))?;
        let stage = self
            .stages
            .get_mut(idx)
            .ok_or_else(|| Error::ShapeMismatch(format!("no stage {idx}")))?;
        let target: &mut [f64] = match field {
            "gamma" => stage.bn.gamma.as_slice_mut().unwrap(),
            "beta" => stage.bn.beta.as_slice_mut().unwrap(),
            "w" => stage.dense.w.as_slice_mut().unwrap(),
            "b" => stage.dense.b.as_slice_mut().unwrap(),
            _ => return Err(Error::ShapeMismatch(format!("bad block field {field:?}"))),
        };
        if target.len() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "block {name} has {} values, got {}",
                target.len(),
                data.len()
            )));
        }
        target.copy_from_slice(data);
        Ok(())
    }

    /// Apply one mutation to every trainable block in fixed order, paired
    /// with the matching gradient block.
    pub fn update_blocks(
        &mut self,
        grads: &HeadGradients,
        mut f: impl FnMut(usize, &mut [f64], &[f64]),
    ) {
        let mut block = 0usize;
        for (s, g) in self.stages.iter_mut().zip(&grads.stages) {
            f(block, s.bn.gamma.as_slice_mut().unwrap(), g.dgamma.as_slice().unwrap());
            block += 1;
            f(block, s.bn.beta.as_slice_mut().unwrap(), g.dbeta.as_slice().unwrap());
            block += 1;
            f(block, s.dense.w.as_slice_mut().unwrap(), g.dw.as_slice().unwrap());
            block += 1;
            f(block, s.dense.b.as_slice_mut().unwrap(), g.db.as_slice().unwrap());
            block += 1;
        }
    }

    /// Flat export of all parameters (including running statistics) in layer
    /// order, for oracle replay and cross-implementation exchange.
    pub fn export_weights(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            let d_in = s.dense.w.nrows();
            let d_out = s.dense.w.ncols();
            out.push(NamedArray { name: format!("stage{i}.gamma"), shape: vec![d_in], data: s.bn.gamma.to_vec() });
            out.push(NamedArray { name: format!("stage{i}.beta"), shape: vec![d_in], data: s.bn.beta.to_vec() });
            out.push(NamedArray {
                name: format!("stage{i}.running_mean"),
                shape: vec![d_in],
                data: s.bn.running_mean.to_vec(),
            });
            out.push(NamedArray {
                name: format!("stage{i}.running_var"),
                shape: vec![d_in],
                data: s.bn.running_var.to_vec(),
            });
            out.push(NamedArray {
                name: format!("stage{i}.w"),
                shape: vec![d_in, d_out],
                data: s.dense.w.iter().cloned().collect(),
            });
            out.push(NamedArray { name: format!("stage{i}.b"), shape: vec![d_out], data: s.dense.b.to_vec() });
        }
        out
    }

    /// Digest over every parameter and running statistic, for determinism
    /// and freeze checks.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for arr in self.export_weights() {
            hasher.update(arr.name.as_bytes());
            for v in arr.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_digest(hasher)
    }
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn apply_activation(z: Array2<f64>, activation: Activation) -> Array2<f64> {
    match activation {
        Activation::Relu => z.mapv(|v| v.max(0.0)),
        Activation::Softmax => {
            let mut out = z;
            for mut row in out.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
            out
        }
    }
}

/// Mean categorical cross-entropy over a batch of probability rows.
pub fn mean_cross_entropy(probs: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    if probs.dim() != targets.dim() {
        return Err(Error::ShapeMismatch(format!(
            "probs {:?} vs targets {:?}",
            probs.dim(),
            targets.dim()
        )));
    }
    let n = probs.nrows() as f64;
    let mut total = 0.0;
    for (p, t) in probs.rows().into_iter().zip(targets.rows()) {
        total += -p
            .iter()
            .zip(t.iter())
            .map(|(&pk, &tk)| tk * pk.clamp(LOSS_CLIP, 1.0).ln())
            .sum::<f64>();
    }
    Ok(total / n)
}

/// Fraction of rows whose argmax matches the target argmax.
pub fn batch_accuracy(probs: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let mut correct = 0usize;
    for (p, t) in probs.rows().into_iter().zip(targets.rows()) {
        if argmax(p.as_slice().unwrap()) == argmax(t.as_slice().unwrap()) {
            correct += 1;
        }
    }
    correct as f64 / probs.nrows() as f64
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}
