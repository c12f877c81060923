//! Acceptance gate: one test per acceptance criterion, each emitting a
//! single pass/fail line. Run with `cargo test --test acceptance`.
//! Criterion 9 (full-scale reproduction) needs the real corpus and a real
//! backbone, so it is `#[ignore]`d; criterion 7 self-skips when the corpus
//! is not present.

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use convoher2::ingest::{scan_dataset, Her2Score, Split, StainModality, DEFAULT_LABEL_PATTERN};
use convoher2::model::{
    batch_accuracy, build_head, count_params, load_checkpoint, save_checkpoint, Backbone,
    BackboneSpec, CheckpointSidecar, FeatureStore, Head, StubBackbone, FEATURE_DIM,
};
use convoher2::reporting::{confusion, per_category_metrics};
use convoher2::trainer::{train_on_cached_features, Monitor, TrainConfig};
use convoher2::verify::{head_gradient_report, head_oracle_max_diff, softmax_contract_max_err};

fn criterion(number: usize, name: &str, outcome: Result<String, String>) {
    match outcome {
        Ok(detail) => println!("acceptance {number:02} {name}: PASS ({detail})"),
        Err(detail) => {
            println!("acceptance {number:02} {name}: FAIL ({detail})");
            panic!("acceptance criterion {number} failed: {detail}");
        }
    }
}

fn one_hot_targets(labels: &[usize]) -> Array2<f64> {
    let mut t = Array2::<f64>::zeros((labels.len(), 4));
    for (i, &l) in labels.iter().enumerate() {
        t[[i, l]] = 1.0;
    }
    t
}

/// Linearly separable synthetic feature clusters, one center per class.
fn synthetic_features(
    n_per_class: usize,
    dim: usize,
    seed: u64,
) -> (FeatureStore, Vec<(String, Her2Score)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = FeatureStore::new(dim);
    let mut samples = Vec::new();
    for score in Her2Score::ALL {
        let c = score.index();
        for i in 0..n_per_class {
            let id = format!("syn_{c}_{i}");
            let feature: Vec<f64> = (0..dim)
                .map(|j| {
                    let center = if j % 4 == c { 1.5 } else { -0.5 };
                    center + rng.gen_range(-0.25..0.25)
                })
                .collect();
            store.insert(id.clone(), feature).unwrap();
            samples.push((id, score));
        }
    }
    (store, samples)
}

#[test]
fn criterion_01_param_count_exactness() {
    let counts = count_params(&BackboneSpec::inception_v3(), &build_head(FEATURE_DIM).unwrap());
    let expected_rows: &[(&str, usize, usize)] = &[
        ("inception_v3 (Functional)", 21_802_784, 0),
        ("flatten (Flatten)", 0, 0),
        ("batch_normalization_0 (BatchNormalization)", 8192, 4096),
        ("dense_0 (Dense)", 4_196_352, 4_196_352),
        ("batch_normalization_1 (BatchNormalization)", 8192, 4096),
        ("dense_1 (Dense)", 3_147_264, 3_147_264),
        ("batch_normalization_2 (BatchNormalization)", 6144, 3072),
        ("dense_2 (Dense)", 2_360_832, 2_360_832),
        ("batch_normalization_3 (BatchNormalization)", 6144, 3072),
        ("dense_3 (Dense)", 6148, 6148),
    ];
    let mut outcome = Ok(format!(
        "total {} trainable {} non-trainable {}",
        counts.total, counts.trainable, counts.non_trainable
    ));
    if counts.total != 31_542_052
        || counts.trainable != 9_724_932
        || counts.non_trainable != 21_817_120
    {
        outcome = Err(format!(
            "totals {}/{}/{} != 31542052/9724932/21817120",
            counts.total, counts.trainable, counts.non_trainable
        ));
    } else if counts.layers.len() != expected_rows.len() {
        outcome = Err(format!("{} rows, expected {}", counts.layers.len(), expected_rows.len()));
    } else {
        for (row, (name, params, trainable)) in counts.layers.iter().zip(expected_rows) {
            if row.layer_name != *name
                || row.param_count != *params
                || row.trainable_count != *trainable
            {
                outcome = Err(format!(
                    "row {:?}: {}/{} != {}/{}",
                    row.layer_name, row.param_count, row.trainable_count, params, trainable
                ));
                break;
            }
        }
    }
    criterion(1, "param-count exactness", outcome);
}

#[test]
fn criterion_02_oracle_equivalence() {
    let head = Head::init(build_head(64).unwrap(), 12);
    let small = head_oracle_max_diff(&head, 100, 8, 99).unwrap();
    let full = Head::init(build_head(FEATURE_DIM).unwrap(), 13);
    let wide = head_oracle_max_diff(&full, 2, 4, 100).unwrap();
    let worst = small.max(wide);
    let outcome = if worst < 1e-4 {
        Ok(format!("max abs diff {worst:.3e} over 102 batches, both forward modes plus loss"))
    } else {
        Err(format!("max abs diff {worst:.3e} >= 1e-4"))
    };
    criterion(2, "head/oracle equivalence", outcome);
}

#[test]
fn criterion_03_gradient_check() {
    let small = Head::init(build_head(32).unwrap(), 21);
    let r_small = head_gradient_report(&small, 8, 1e-3, 1e-3, 32, 5).unwrap();
    let full = Head::init(build_head(FEATURE_DIM).unwrap(), 5);
    let r_full = head_gradient_report(&full, 4, 1e-3, 1e-3, 32, 6).unwrap();
    // 32 coordinates per block, or exhaustive for blocks smaller than that
    let coverage_ok = [(&small, &r_small), (&full, &r_full)].iter().all(|(head, report)| {
        head.trainable_blocks()
            .iter()
            .zip(&report.blocks)
            .all(|((_, params), check)| check.coords_checked == params.len().min(32))
    });
    let worst = r_small.max_rel_error().max(r_full.max_rel_error());
    let outcome = if r_small.passed() && r_full.passed() && coverage_ok {
        Ok(format!(
            "h=1e-3, max rel err {worst:.3e} over {} blocks (full-width head included), 32 coords/block",
            r_small.blocks.len() + r_full.blocks.len()
        ))
    } else {
        Err(format!("max rel err {worst:.3e} > 1e-3 or coverage shortfall"))
    };
    criterion(3, "gradient check vs finite differences", outcome);
}

#[test]
fn criterion_04_softmax_contract() {
    let worst = softmax_contract_max_err(10_000, 404);
    let outcome = if worst < 1e-12 {
        Ok(format!("10^4 vectors, sum-to-1 and shift-invariance err {worst:.3e}"))
    } else {
        Err(format!("err {worst:.3e} >= 1e-12"))
    };
    criterion(4, "softmax probability contract", outcome);
}

#[test]
fn criterion_05_overfit_sanity() {
    // 8 images per category through the stub backbone; the head must
    // memorize 32 samples. lr pinned at 1e-3 for the 100-epoch budget.
    let backbone = StubBackbone::new(FEATURE_DIM, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut store = FeatureStore::new(FEATURE_DIM);
    let mut samples = Vec::new();
    for score in Her2Score::ALL {
        let c = score.index();
        for i in 0..8 {
            let img = Array4::from_shape_fn((1, 64, 64, 3), |(_, y, x, ch)| {
                let base = (((y / 8 + x / 8 + c * (ch + 1)) % 4) as f32) / 2.0 - 0.75;
                base + rng.gen_range(-0.05..0.05f32)
            });
            let feats = backbone.extract(&img).unwrap();
            let id = format!("img_{c}_{i}");
            store.insert(id.clone(), feats.row(0).to_vec()).unwrap();
            samples.push((id, score));
        }
    }
    let mut head = Head::init(build_head(FEATURE_DIM).unwrap(), 1);
    let config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 32,
        epochs: 100,
        seed: 1,
        checkpoint_monitor: Monitor::TrainLoss,
        ..TrainConfig::default()
    };
    let outcome_run =
        train_on_cached_features(&mut head, &store, &samples, None, &config, None, "overfit")
            .unwrap();
    let epoch1 = outcome_run.history.epochs[0].train_loss;
    let ln4 = 4.0f64.ln();
    let best_acc = outcome_run
        .history
        .epochs
        .iter()
        .map(|e| e.train_accuracy)
        .fold(0.0, f64::max);
    let outcome = if (epoch1 - ln4).abs() <= 0.5 && best_acc >= 0.95 {
        Ok(format!(
            "epoch-1 loss {epoch1:.4} (ln4 {ln4:.4}), best train acc {best_acc:.4} within {} epochs",
            outcome_run.history.epochs.len()
        ))
    } else {
        Err(format!("epoch-1 loss {epoch1:.4} vs ln4 {ln4:.4}, best acc {best_acc:.4}"))
    };
    criterion(5, "overfit sanity at desk scale", outcome);
}

#[test]
fn criterion_06_determinism() {
    let (store, samples) = synthetic_features(16, FEATURE_DIM, 7);
    let config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 32,
        epochs: 3,
        seed: 7,
        checkpoint_monitor: Monitor::TrainLoss,
        ..TrainConfig::default()
    };
    let run = || {
        let mut head = Head::init(build_head(FEATURE_DIM).unwrap(), 7);
        let out =
            train_on_cached_features(&mut head, &store, &samples, None, &config, None, "det")
                .unwrap();
        let mut history = out.history;
        for e in &mut history.epochs {
            e.wall_seconds = 0.0; // only non-numeric field
        }
        (history, head.checksum())
    };
    let (h1, c1) = run();
    let (h2, c2) = run();
    let outcome = if h1 == h2 && c1 == c2 {
        Ok(format!("64 samples, 3 epochs twice: identical histories, checksum {}", &c1[..12]))
    } else {
        Err("seeded reruns diverged".into())
    };
    criterion(6, "seeded determinism", outcome);
}

#[test]
fn criterion_07_ingest_fidelity_real_corpus() {
    let root = match std::env::var("CONVOHER2_DATA_ROOT") {
        Ok(r) => std::path::PathBuf::from(r),
        Err(_) => {
            println!(
                "acceptance 07 ingest fidelity: SKIPPED (corpus not present; set CONVOHER2_DATA_ROOT)"
            );
            return;
        }
    };
    let pattern = regex::Regex::new(DEFAULT_LABEL_PATTERN).unwrap();
    let expected = [240usize, 1153, 2142, 1335];
    let mut detail = String::new();
    for modality in [StainModality::HE, StainModality::IHC] {
        let dir = root.join(modality.as_str());
        let manifest = scan_dataset(&dir, modality, &pattern).unwrap();
        let counts = manifest.class_counts();
        for (got, want) in counts.iter().zip(expected) {
            let diff = got.abs_diff(want);
            if diff > 3 {
                criterion(
                    7,
                    "ingest fidelity",
                    Err(format!("{}: class counts {counts:?} vs {expected:?}", modality.as_str())),
                );
            }
        }
        let train = manifest.records_in(Split::Train).len();
        let test = manifest.records_in(Split::Test).len();
        if (train, test) != (3896, 977) {
            criterion(
                7,
                "ingest fidelity",
                Err(format!("{}: splits {train}/{test} != 3896/977", modality.as_str())),
            );
        }
        detail.push_str(&format!("{} {train}/{test}; ", modality.as_str()));
    }
    criterion(7, "ingest fidelity", Ok(detail.trim_end_matches("; ").to_string()));
}

#[test]
fn criterion_08_confusion_accuracy_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let n = 1000usize;
    let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
    let matrix = confusion(&pred, &labels).unwrap();
    // accuracy as the evaluation path computes it, from one-hot rows
    let probs = one_hot_targets(&pred);
    let targets = one_hot_targets(&labels);
    let eval_accuracy = batch_accuracy(&probs, &targets);
    let trace_over_n = matrix.trace() as f64 / matrix.total() as f64;
    let metrics = per_category_metrics(&matrix);
    // recall weighted by support, folded in integer space: recall_i * support_i
    // recovers the diagonal count exactly
    let weighted: f64 = metrics
        .iter()
        .enumerate()
        .map(|(i, m)| {
            assert_eq!(m.recall * m.support as f64, matrix.counts[i][i] as f64);
            m.recall * m.support as f64
        })
        .sum::<f64>()
        / matrix.total() as f64;
    let outcome = if trace_over_n == eval_accuracy
        && trace_over_n == matrix.accuracy()
        && weighted == trace_over_n
    {
        Ok(format!("1000 pairs, accuracy {trace_over_n:.4}, identities exact"))
    } else {
        Err(format!(
            "trace/N {trace_over_n} vs eval {eval_accuracy} vs weighted recall {weighted}"
        ))
    };
    criterion(8, "confusion/accuracy identity", outcome);
}

/// Full-scale reproduction (200 epochs on 3896 images per modality with the
/// real pretrained backbone). Not desk-scale: requires CONVOHER2_DATA_ROOT
/// plus real-backbone feature caches CONVOHER2_FEATURES_HE /
/// CONVOHER2_FEATURES_IHC, and accelerator-class compute time.
#[test]
#[ignore]
fn criterion_09_full_reproduction() {
    let targets = [(StainModality::HE, "CONVOHER2_FEATURES_HE", 0.8510), (
        StainModality::IHC,
        "CONVOHER2_FEATURES_IHC",
        0.8779,
    )];
    let root = std::path::PathBuf::from(
        std::env::var("CONVOHER2_DATA_ROOT").expect("CONVOHER2_DATA_ROOT must point at the corpus"),
    );
    let pattern = regex::Regex::new(DEFAULT_LABEL_PATTERN).unwrap();
    for (modality, feature_env, expected) in targets {
        let features = std::path::PathBuf::from(
            std::env::var(feature_env).unwrap_or_else(|_| panic!("{feature_env} must be set")),
        );
        let store = FeatureStore::load(&features).unwrap();
        let manifest = scan_dataset(&root.join(modality.as_str()), modality, &pattern).unwrap();
        let train_samples = convoher2::trainer::labeled_samples(&manifest, Split::Train);
        let val_samples = convoher2::trainer::labeled_samples(&manifest, Split::Test);
        let config = TrainConfig { modality: Some(modality), ..TrainConfig::default() };
        let mut head = Head::init(build_head(FEATURE_DIM).unwrap(), config.seed);
        let out = train_on_cached_features(
            &mut head,
            &store,
            &train_samples,
            Some(&val_samples),
            &config,
            None,
            "full",
        )
        .unwrap();
        let best_val_acc = out
            .history
            .epochs
            .iter()
            .filter_map(|e| e.val_accuracy)
            .fold(0.0, f64::max);
        assert!(
            (best_val_acc - expected).abs() <= 0.03,
            "{}: best val accuracy {best_val_acc:.4} not within 3 points of {expected:.4}",
            modality.as_str()
        );
        println!(
            "acceptance 09 full reproduction: PASS ({} val acc {best_val_acc:.4})",
            modality.as_str()
        );
    }
}

#[test]
fn criterion_10_checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    // bit-exact roundtrip on a head with non-trivial running statistics
    let mut head = Head::init(build_head(FEATURE_DIM).unwrap(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = Array2::from_shape_fn((8, FEATURE_DIM), |_| rng.gen_range(-2.0..2.0));
    let (_, cache) = head.train_forward(&x).unwrap();
    head.update_running_stats(&cache);
    let path = dir.path().join("head.bin");
    let sidecar = CheckpointSidecar {
        epoch: 1,
        monitored_loss: 1.0,
        config_hash: "rt".into(),
        modality: "HE".into(),
        created_at: "t".into(),
    };
    save_checkpoint(&head, &path, &sidecar).unwrap();
    let (loaded, meta) = load_checkpoint(&path, &build_head(FEATURE_DIM).unwrap()).unwrap();
    let probe = Array2::from_shape_fn((4, FEATURE_DIM), |_| rng.gen_range(-2.0..2.0));
    let before = head.infer(&probe).unwrap();
    let after = loaded.infer(&probe).unwrap();
    let bit_exact = before
        .iter()
        .zip(after.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits())
        && head.checksum() == loaded.checksum()
        && meta.is_some();

    // strictly improving checkpoint sequence during a short training run
    let (store, samples) = synthetic_features(16, FEATURE_DIM, 9);
    let config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 32,
        epochs: 8,
        seed: 9,
        checkpoint_monitor: Monitor::TrainLoss,
        ..TrainConfig::default()
    };
    let mut train_head = Head::init(build_head(FEATURE_DIM).unwrap(), 9);
    let ckpt = dir.path().join("train.bin");
    let out = train_on_cached_features(
        &mut train_head,
        &store,
        &samples,
        None,
        &config,
        Some(&ckpt),
        "seq",
    )
    .unwrap();
    let losses: Vec<f64> = out.checkpoints.iter().map(|c| c.monitored_loss).collect();
    let strictly_decreasing = !losses.is_empty() && losses.windows(2).all(|w| w[1] < w[0]);

    let outcome = if bit_exact && strictly_decreasing {
        Ok(format!(
            "forward bit-exact after reload; {} checkpoints strictly improving",
            losses.len()
        ))
    } else {
        Err(format!("bit_exact {bit_exact}, checkpoint losses {losses:?}"))
    };
    criterion(10, "checkpoint round-trip", outcome);
}
