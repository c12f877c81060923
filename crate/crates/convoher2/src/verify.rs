//! Self-contained verification suite: replays the head's layers through the
//! independent oracle numerics and cross-checks gradients, softmax
//! contracts, and loss values. Runs without any dataset.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{build_head, mean_cross_entropy, Head};
use crate::oracle::{self, BatchNormParams, GradientCheckReport, NormBatch};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn random_input(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0))
}

fn random_targets(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut t = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        t[[i, rng.gen_range(0..k)]] = 1.0;
    }
    t
}

/// Replay a head forward pass (train or infer mode) entirely through the
/// oracle functions, with plain-loop matrix products.
pub fn oracle_forward(head: &Head, x: &Array2<f64>, train_mode: bool) -> Array2<f64> {
    let n = x.nrows();
    let mut cur = x.clone();
    for (s, stage) in head.stages.iter().enumerate() {
        let d_in = stage.dense.w.nrows();
        let d_out = stage.dense.w.ncols();
        // batch norm, one feature at a time
        let mut bn_out = Array2::<f64>::zeros((n, d_in));
        for j in 0..d_in {
            let params = BatchNormParams {
                gamma: stage.bn.gamma[j],
                beta: stage.bn.beta[j],
                epsilon: stage.bn.epsilon,
                momentum: stage.bn.momentum,
                running_mean: stage.bn.running_mean[j],
                running_var: stage.bn.running_var[j],
            };
            let col: Vec<f64> = cur.column(j).to_vec();
            let y = if train_mode {
                oracle::bn_forward_train(&NormBatch::new(col), &params).y
            } else {
                oracle::bn_forward_infer(&col, &params)
            };
            for i in 0..n {
                bn_out[[i, j]] = y[i];
            }
        }
        // dense, plain loops
        let mut z = Array2::<f64>::zeros((n, d_out));
        for i in 0..n {
            for k in 0..d_out {
                let mut acc = stage.dense.b[k];
                for j in 0..d_in {
                    acc += bn_out[[i, j]] * stage.dense.w[[j, k]];
                }
                z[[i, k]] = acc;
            }
        }
        let last = s == head.stages.len() - 1;
        let mut out = Array2::<f64>::zeros((n, d_out));
        for i in 0..n {
            let row: Vec<f64> = z.row(i).to_vec();
            let activated = if last { oracle::softmax(&row) } else { oracle::relu(&row) };
            for k in 0..d_out {
                out[[i, k]] = activated[k];
            }
        }
        cur = out;
    }
    cur
}

/// Maximum absolute divergence between the head's own forward passes (both
/// modes) plus loss and the oracle replay, over `n_batches` random batches.
pub fn head_oracle_max_diff(
    head: &Head,
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = head.spec.input_dim;
    let k = head.spec.output_dim();
    let mut max_diff = 0.0f64;
    for _ in 0..n_batches {
        let x = random_input(batch_size, d, &mut rng);
        let t = random_targets(batch_size, k, &mut rng);

        let (train_probs, _) = head.train_forward(&x)?;
        let oracle_train = oracle_forward(head, &x, true);
        let infer_probs = head.infer(&x)?;
        let oracle_infer = oracle_forward(head, &x, false);
        for (a, b) in train_probs.iter().zip(oracle_train.iter()) {
            max_diff = max_diff.max((a - b).abs());
        }
        for (a, b) in infer_probs.iter().zip(oracle_infer.iter()) {
            max_diff = max_diff.max((a - b).abs());
        }
        // loss along both routes
        let impl_loss = mean_cross_entropy(&train_probs, &t)?;
        let oracle_loss = (0..batch_size)
            .map(|i| {
                oracle::cross_entropy(
                    &oracle_train.row(i).to_vec(),
                    &t.row(i).to_vec(),
                )
                .unwrap()
            })
            .sum::<f64>()
            / batch_size as f64;
        max_diff = max_diff.max((impl_loss - oracle_loss).abs());
    }
    Ok(max_diff)
}

/// Batch-stat BN + dense pre-activations for one stage (no activation).
fn stage_preactivations(stage: &crate::model::Stage, x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows() as f64;
    let d = x.ncols();
    let mut mu = vec![0.0; d];
    let mut var = vec![0.0; d];
    for j in 0..d {
        let col = x.column(j);
        let m = col.sum() / n;
        mu[j] = m;
        var[j] = col.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n;
    }
    let mut bn = x.clone();
    for mut row in bn.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = stage.bn.gamma[j] * (*v - mu[j]) / (var[j] + stage.bn.epsilon).sqrt()
                + stage.bn.beta[j];
        }
    }
    bn.dot(&stage.dense.w) + &stage.dense.b
}

/// Nudge hidden-layer biases so that on the given batch every ReLU
/// pre-activation sits at least `margin` from zero. Finite differences with
/// step h are only trustworthy away from activation kinks; this picks an
/// equivalent evaluation point where the loss is smooth within the h-ball.
pub fn condition_for_gradient_check(head: &mut Head, x: &Array2<f64>, margin: f64) {
    let n_stages = head.stages.len();
    let mut cur = x.clone();
    for s in 0..n_stages {
        let mut z = stage_preactivations(&head.stages[s], &cur);
        if s + 1 == n_stages {
            break;
        }
        for k in 0..z.ncols() {
            let zs: Vec<f64> = z.column(k).to_vec();
            let valid = |shift: f64| zs.iter().all(|&v| (v + shift).abs() >= margin);
            if valid(0.0) {
                continue;
            }
            // candidate shifts: push each sample to either edge of the
            // forbidden band, take the smallest valid one
            let mut best: Option<f64> = None;
            for &v in &zs {
                for cand in [margin - v, -margin - v] {
                    if valid(cand) && best.map_or(true, |b: f64| cand.abs() < b.abs()) {
                        best = Some(cand);
                    }
                }
            }
            let shift = best
                .unwrap_or_else(|| margin - zs.iter().cloned().fold(f64::INFINITY, f64::min));
            head.stages[s].dense.b[k] += shift;
            for v in z.column_mut(k) {
                *v += shift;
            }
        }
        cur = z.mapv(|v| v.max(0.0));
    }
}

/// Finite-difference gradient check of a head's analytic backward pass.
///
/// The head's hidden biases are first conditioned so no ReLU pre-activation
/// lies within 20h of its kink on the probe batch.
pub fn head_gradient_report(
    head: &Head,
    batch_size: usize,
    h: f64,
    tolerance: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradientCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_input(batch_size, head.spec.input_dim, &mut rng);
    let t = random_targets(batch_size, head.spec.output_dim(), &mut rng);
    let mut head = head.clone();
    condition_for_gradient_check(&mut head, &x, 20.0 * h);
    let head = &head;
    let (_, cache) = head.train_forward(&x)?;
    let grads = head.backward(&cache, &t)?;
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient("head".into()));
    }
    let mut analytic = Vec::new();
    grads.for_each_block(|name, g| analytic.push((name, g.to_vec())));
    let blocks: Vec<(String, Vec<f64>, Vec<f64>)> = head
        .trainable_blocks()
        .into_iter()
        .zip(analytic)
        .map(|((name, params), (_, grad))| (name, params, grad))
        .collect();
    let mut probe = head.clone();
    oracle::gradient_check(
        &blocks,
        |name, vals| {
            probe.set_block(name, vals).unwrap();
            let (p, _) = probe.train_forward(&x).unwrap();
            mean_cross_entropy(&p, &t).unwrap()
        },
        h,
        tolerance,
        max_coords,
        seed,
    )
}

/// Softmax probability contract over many random logit vectors: rows sum to
/// one and shifting all logits by a constant leaves the output unchanged.
pub fn softmax_contract_max_err(n_vectors: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_vectors {
        let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let p = oracle::softmax(&z);
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        let c = rng.gen_range(-100.0..100.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let q = oracle::softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            worst = worst.max((a - b).abs());
        }
        assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
    }
    worst
}

/// Run the full verification suite. Every check is self-contained (synthetic
/// tensors, seeded).
pub fn run_all() -> Vec<CheckResult> {
    let mut results = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        results.push(CheckResult { name: name.into(), passed, detail });
    };

    // Batch-norm reference values.
    {
        let out = oracle::bn_forward_train(
            &NormBatch::new(vec![1.0, 2.0, 3.0]),
            &BatchNormParams { epsilon: 0.0, ..Default::default() },
        );
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        let err = out
            .y
            .iter()
            .zip(expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            .max((out.mu_batch - 2.0).abs())
            .max((out.sigma2_batch - 2.0 / 3.0).abs());
        push("bn_train_reference", err < 1e-9, format!("max err {err:.3e}"));
    }
    {
        let out = oracle::bn_forward_train(
            &NormBatch::new(vec![7.0, 7.0, 7.0, 7.0]),
            &BatchNormParams { beta: 0.5, epsilon: 1e-3, ..Default::default() },
        );
        let err = out.y.iter().map(|v| (v - 0.5).abs()).fold(0.0, f64::max);
        push("bn_train_constant_batch", err < 1e-12, format!("max err {err:.3e}"));
    }
    {
        let params = BatchNormParams {
            running_mean: 2.0,
            running_var: 2.0 / 3.0,
            epsilon: 0.0,
            ..Default::default()
        };
        let y = oracle::bn_forward_infer(&[1.0, 2.0, 3.0], &params);
        let train = oracle::bn_forward_train(
            &NormBatch::new(vec![1.0, 2.0, 3.0]),
            &BatchNormParams { epsilon: 0.0, ..Default::default() },
        );
        let err = y
            .iter()
            .zip(&train.y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        push("bn_infer_matches_batch_stats", err < 1e-12, format!("max err {err:.3e}"));
    }

    // ReLU and softmax contracts.
    {
        let ok = oracle::relu(&[-1.0, 0.0, 3.0]) == vec![0.0, 0.0, 3.0];
        push("relu_reference", ok, "max(0,x) on [-1,0,3]".into());
    }
    {
        let worst = softmax_contract_max_err(10_000, 2024);
        push(
            "softmax_sum_and_shift_invariance",
            worst < 1e-12,
            format!("max err {worst:.3e} over 10000 vectors"),
        );
    }
    {
        let p = oracle::softmax(&[1000.0, 0.0, 0.0, 0.0]);
        push(
            "softmax_overflow_safety",
            p.iter().all(|v| v.is_finite()) && (p[0] - 1.0).abs() < 1e-12,
            format!("p[0] = {}", p[0]),
        );
    }

    // Cross-entropy reference values.
    {
        let ln4 = 4.0f64.ln();
        let uniform = oracle::cross_entropy(&[0.25; 4], &[0.0, 1.0, 0.0, 0.0]).unwrap();
        let clipped = oracle::cross_entropy(&[1e-9, 1.0 - 1e-9, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let ok = (uniform - ln4).abs() < 1e-9 && (clipped - 16.11809565095832).abs() < 1e-6;
        push(
            "cross_entropy_reference",
            ok,
            format!("uniform {uniform:.6}, clipped {clipped:.4}"),
        );
    }

    // CE-of-softmax analytic gradient equals p - t.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut t = vec![0.0; 4];
            t[rng.gen_range(0..4)] = 1.0;
            let tt = t.clone();
            let numeric = oracle::finite_diff_grad(
                move |z| oracle::cross_entropy(&oracle::softmax(z), &tt).unwrap(),
                &z,
                1e-6,
            );
            let p = oracle::softmax(&z);
            for k in 0..4 {
                let analytic = p[k] - t[k];
                let denom = analytic.abs().max(numeric[k].abs()).max(1e-8);
                worst = worst.max((numeric[k] - analytic).abs() / denom);
            }
        }
        push(
            "ce_softmax_gradient_p_minus_t",
            worst < 1e-6,
            format!("max rel err {worst:.3e}"),
        );
    }

    // Head forward equals oracle replay (train + infer + loss).
    {
        let head = Head::init(build_head(64).unwrap(), 12);
        match head_oracle_max_diff(&head, 100, 8, 99) {
            Ok(diff) => push(
                "head_matches_oracle_small",
                diff < 1e-4,
                format!("max abs diff {diff:.3e} over 100 batches"),
            ),
            Err(e) => push("head_matches_oracle_small", false, e.to_string()),
        }
        let full = Head::init(build_head(2048).unwrap(), 13);
        match head_oracle_max_diff(&full, 2, 4, 100) {
            Ok(diff) => push(
                "head_matches_oracle_full_width",
                diff < 1e-4,
                format!("max abs diff {diff:.3e}"),
            ),
            Err(e) => push("head_matches_oracle_full_width", false, e.to_string()),
        }
    }

    // Analytic gradients vs central finite differences.
    {
        let head = Head::init(build_head(32).unwrap(), 21);
        match head_gradient_report(&head, 8, 1e-3, 1e-3, 32, 5) {
            Ok(report) => push(
                "head_gradient_check",
                report.passed(),
                format!(
                    "max rel err {:.3e} over {} blocks",
                    report.max_rel_error(),
                    report.blocks.len()
                ),
            ),
            Err(e) => push("head_gradient_check", false, e.to_string()),
        }
    }

    // Stub backbone + head pipeline on synthetic images: probability rows.
    {
        use crate::model::{StubBackbone, Backbone};
        use ndarray::Array4;
        let backbone = StubBackbone::new(64, 0);
        let images = Array4::from_shape_fn((4, 32, 32, 3), |(n, i, j, c)| {
            (((n + 1) * (i + 2 * j + c)) % 11) as f32 / 11.0 - 0.5
        });
        let feats = backbone.extract(&images).unwrap();
        let head = Head::init(build_head(64).unwrap(), 8);
        match head.infer(&feats) {
            Ok(p) => {
                let worst = p
                    .rows()
                    .into_iter()
                    .map(|r| (r.sum() - 1.0).abs())
                    .fold(0.0, f64::max);
                push(
                    "stub_backbone_pipeline",
                    worst < 1e-12 && p.iter().all(|&v| v > 0.0),
                    format!("row-sum err {worst:.3e}"),
                );
            }
            Err(e) => push("stub_backbone_pipeline", false, e.to_string()),
        }
    }

    // A deliberately corrupted gradient must be caught.
    {
        let head = Head::init(build_head(16).unwrap(), 31);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_input(4, 16, &mut rng);
        let t = random_targets(4, 4, &mut rng);
        let (_, cache) = head.train_forward(&x).unwrap();
        let grads = head.backward(&cache, &t).unwrap();
        let blocks = head.trainable_blocks();
        let (name, params) = blocks[2].clone();
        let corrupted: Vec<f64> = grads.stages[0].dw.iter().map(|g| g * 2.0).collect();
        let mut probe = head.clone();
        let report = oracle::gradient_check(
            &[(name, params, corrupted)],
            |n, vals| {
                probe.set_block(n, vals).unwrap();
                let (p, _) = probe.train_forward(&x).unwrap();
                mean_cross_entropy(&p, &t).unwrap()
            },
            1e-3,
            1e-3,
            32,
            3,
        )
        .unwrap();
        push(
            "gradient_check_detects_fault",
            !report.passed(),
            format!("injected 2x fault, max rel err {:.3e}", report.max_rel_error()),
        );
    }

    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_end_to_end() {
        let results = run_all();
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert!(results.len() >= 10);
    }
}
