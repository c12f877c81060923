//! From-scratch reference numerics: batch normalization, ReLU, softmax,
//! categorical cross-entropy, and finite-difference gradient checking.
//!
//! Everything here is written directly from the defining formulas and stays
//! independent of the model module's layer code; the two paths cross-check
//! each other in tests and in the `verify` command.

use crate::{Error, Result};

pub const LOSS_CLIP: f64 = 1e-7;
pub const DEFAULT_BN_EPSILON: f64 = 1e-3;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.99;

/// One feature dimension's activations across a mini-batch.
#[derive(Debug, Clone)]
pub struct NormBatch {
    pub x: Vec<f64>,
}

impl NormBatch {
    pub fn new(x: Vec<f64>) -> Self {
        assert!(!x.is_empty(), "batch must have m >= 1");
        NormBatch { x }
    }

    pub fn m(&self) -> usize {
        self.x.len()
    }
}

/// Learned scale/shift plus running statistics for one feature.
#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub gamma: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub momentum: f64,
    pub running_mean: f64,
    pub running_var: f64,
}

impl Default for BatchNormParams {
    fn default() -> Self {
        BatchNormParams {
            gamma: 1.0,
            beta: 0.0,
            epsilon: DEFAULT_BN_EPSILON,
            momentum: DEFAULT_BN_MOMENTUM,
            running_mean: 0.0,
            running_var: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BnTrainOutput {
    pub y: Vec<f64>,
    pub mu_batch: f64,
    pub sigma2_batch: f64,
    pub updated: BatchNormParams,
}

/// Training-mode batch normalization over one feature dimension.
///
/// Uses the population variance (divide by m). Running statistics are
/// returned updated as running <- momentum*running + (1-momentum)*batch.
pub fn bn_forward_train(batch: &NormBatch, params: &BatchNormParams) -> BnTrainOutput {
    let m = batch.m() as f64;
    let mu = batch.x.iter().sum::<f64>() / m;
    let sigma2 = batch.x.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
    let inv_std = 1.0 / (sigma2 + params.epsilon).sqrt();
    let y = batch
        .x
        .iter()
        .map(|&v| params.gamma * (v - mu) * inv_std + params.beta)
        .collect();
    let mut updated = params.clone();
    updated.running_mean = params.momentum * params.running_mean + (1.0 - params.momentum) * mu;
    updated.running_var = params.momentum * params.running_var + (1.0 - params.momentum) * sigma2;
    BnTrainOutput { y, mu_batch: mu, sigma2_batch: sigma2, updated }
}

/// Inference-mode batch normalization using the running statistics.
pub fn bn_forward_infer(x: &[f64], params: &BatchNormParams) -> Vec<f64> {
    let inv_std = 1.0 / (params.running_var + params.epsilon).sqrt();
    x.iter()
        .map(|&v| params.gamma * (v - params.running_mean) * inv_std + params.beta)
        .collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Numerically safe softmax with max-subtraction.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Categorical cross-entropy with the predicted probability clipped to
/// [1e-7, 1] before the log.
pub fn cross_entropy(p: &[f64], t: &[f64]) -> Result<f64> {
    if p.len() != t.len() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities len {} vs targets len {}",
            p.len(),
            t.len()
        )));
    }
    Ok(-p
        .iter()
        .zip(t)
        .map(|(&pk, &tk)| tk * pk.clamp(LOSS_CLIP, 1.0).ln())
        .sum::<f64>())
}

/// Central-difference gradient estimate of a scalar function.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let plus = f(&probe);
        probe[k] = x[k] - h;
        let minus = f(&probe);
        probe[k] = x[k];
        grad[k] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// One parameter block's gradient-check outcome.
#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradientCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub tolerance: f64,
}

impl GradientCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error <= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

/// Deterministic coordinate subsample: at most `max_coords` indices from
/// [0, n), evenly strided from a seed-dependent offset.
pub fn subsample_coords(n: usize, max_coords: usize, seed: u64) -> Vec<usize> {
    if n <= max_coords {
        return (0..n).collect();
    }
    let stride = n / max_coords;
    let offset = (seed as usize) % stride.max(1);
    (0..max_coords).map(|k| (offset + k * stride) % n).collect()
}

/// Compare analytic gradients for named parameter blocks against central
/// finite differences on a subsampled coordinate set.
///
/// `loss_with` re-evaluates the scalar loss after overwriting one block's
/// flat parameter vector; `blocks` supplies (name, params, analytic grad).
pub fn gradient_check<F>(
    blocks: &[(String, Vec<f64>, Vec<f64>)],
    mut loss_with: F,
    h: f64,
    tolerance: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradientCheckReport>
where
    F: FnMut(&str, &[f64]) -> f64,
{
    let mut out = Vec::new();
    for (name, params, analytic) in blocks {
        if analytic.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        let coords = subsample_coords(params.len(), max_coords, seed);
        let mut max_rel = 0.0f64;
        let mut probe = params.clone();
        for &k in &coords {
            probe[k] = params[k] + h;
            let plus = loss_with(name, &probe);
            probe[k] = params[k] - h;
            let minus = loss_with(name, &probe);
            probe[k] = params[k];
            let numeric = (plus - minus) / (2.0 * h);
            let denom = numeric.abs().max(analytic[k].abs()).max(1e-8);
            max_rel = max_rel.max((numeric - analytic[k]).abs() / denom);
        }
        // restore
        loss_with(name, params);
        out.push(BlockCheck {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_error: max_rel,
        });
    }
    Ok(GradientCheckReport { blocks: out, tolerance })
}
