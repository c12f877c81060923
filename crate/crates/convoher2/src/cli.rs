//! Command-line entry point: composable pipeline commands over a shared
//! config (flag > environment > file > default) with stable exit codes.
//!
//! Exit codes: 0 success, 1 verification/evaluation failure, 2 usage or
//! input error.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use ndarray::Array4;
use regex::Regex;

use crate::config::{load_config, PipelineConfig};
use crate::ingest::{scan_dataset, split_manifest, DatasetManifest, Her2Score, Split, StainModality};
use crate::model::{
    argmax, build_head, compose, load_checkpoint, BackboneSpec, Backbone, FeatureStore, Head,
    ModelMetadata, StubBackbone, FEATURE_DIM,
};
use crate::preprocess::{decode_resize, normalize, AugmentPolicy, SIDE_PX};
use crate::reporting::{comparison_table, curves, full_report, ComparisonRow};
use crate::trainer::{
    labeled_samples, predict_split, train, train_on_cached_features, CheckpointMeta, TrainHistory,
    TrainOutcome,
};
use crate::{verify, Error, Result};

#[derive(Parser)]
#[command(name = "convoher2", version, about = "HER2 patch scoring pipeline")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that resolves a pipeline configuration.
#[derive(Args, Default)]
struct ConfigFlags {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigFlags {
    fn resolve(&self, extra: &[(String, String)]) -> Result<PipelineConfig> {
        if let Some(path) = &self.config {
            if !path.exists() {
                return Err(Error::Usage(format!("config file not found: {}", path.display())));
            }
        }
        let mut overrides: Vec<(String, String)> = Vec::new();
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        if let Some(dir) = &self.out_dir {
            overrides.push(("out_dir".into(), dir.display().to_string()));
        }
        overrides.extend(extra.iter().cloned());
        load_config(self.config.as_deref(), &|k| std::env::var(k).ok(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Scan a dataset directory into a manifest and split it
    Ingest {
        #[command(flatten)]
        common: ConfigFlags,
        /// stain modality, HE or IHC
        #[arg(long)]
        modality: String,
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// manifest output path (default <out_dir>/manifest_<modality>.tsv)
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        train_fraction: Option<f64>,
        /// reshuffle records that already carry a split assignment
        #[arg(long)]
        force_split: bool,
    },
    /// Run every image in a manifest through the frozen backbone and cache
    /// the feature vectors
    ExtractFeatures {
        #[command(flatten)]
        common: ConfigFlags,
        #[arg(long)]
        manifest: PathBuf,
        /// feature cache output path (default <out_dir>/features_<modality>.bin)
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Train the classifier head
    Train {
        #[command(flatten)]
        common: ConfigFlags,
        #[arg(long)]
        modality: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// checkpoint selection metric, train_loss or val_loss
        #[arg(long)]
        monitor: Option<String>,
        /// train from a prebuilt feature cache instead of decoding images
        #[arg(long)]
        use_cached_features: bool,
        #[arg(long)]
        features: Option<PathBuf>,
        /// checkpoint output path (default <out_dir>/checkpoint_<modality>.bin)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest's test split
    Evaluate {
        #[command(flatten)]
        common: ConfigFlags,
        #[arg(long)]
        modality: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score one image with a trained checkpoint
    Predict {
        #[command(flatten)]
        common: ConfigFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Render training curves and the accuracy comparison table
    Report {
        #[command(flatten)]
        common: ConfigFlags,
        /// history file written by train (one JSON record per epoch)
        #[arg(long)]
        history: PathBuf,
        /// measured accuracy to append to the comparison table
        #[arg(long)]
        accuracy: Option<f64>,
        /// dataset label for the measured row
        #[arg(long, default_value = "BCI dataset")]
        dataset: String,
    },
    /// Run the numerics verification suite (no dataset required)
    Verify,
}

/// Parse argv and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version on stdout with success
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Ingest { common, modality, data_root, manifest, train_fraction, force_split } => {
            let modality = parse_modality(&modality)?;
            let mut extra = vec![("modality".into(), modality.as_str().to_string())];
            if let Some(root) = &data_root {
                extra.push(("data_root".into(), root.display().to_string()));
            }
            if let Some(f) = train_fraction {
                extra.push(("train_fraction".into(), f.to_string()));
            }
            let config = common.resolve(&extra)?;
            cmd_ingest(&config, modality, manifest, force_split)
        }
        Command::ExtractFeatures { common, manifest, features } => {
            let config = common.resolve(&[])?;
            cmd_extract_features(&config, &manifest, features)
        }
        Command::Train {
            common,
            modality,
            manifest,
            epochs,
            batch_size,
            lr,
            monitor,
            use_cached_features,
            features,
            checkpoint,
        } => {
            let modality = parse_modality(&modality)?;
            let mut extra = vec![("modality".into(), modality.as_str().to_string())];
            if let Some(e) = epochs {
                extra.push(("epochs".into(), e.to_string()));
            }
            if let Some(b) = batch_size {
                extra.push(("batch_size".into(), b.to_string()));
            }
            if let Some(lr) = lr {
                extra.push(("learning_rate".into(), lr.to_string()));
            }
            if let Some(m) = &monitor {
                extra.push(("checkpoint_monitor".into(), m.clone()));
            }
            if use_cached_features {
                extra.push(("use_cached_features".into(), "true".into()));
            }
            let config = common.resolve(&extra)?;
            cmd_train(&config, modality, &manifest, features, checkpoint)
        }
        Command::Evaluate { common, modality, manifest, checkpoint } => {
            let modality = parse_modality(&modality)?;
            let config = common.resolve(&[("modality".into(), modality.as_str().to_string())])?;
            cmd_evaluate(&config, modality, &manifest, &checkpoint)
        }
        Command::Predict { common, checkpoint, image } => {
            let config = common.resolve(&[])?;
            cmd_predict(&config, &checkpoint, &image)
        }
        Command::Report { common, history, accuracy, dataset } => {
            let config = common.resolve(&[])?;
            cmd_report(&config, &history, accuracy, &dataset)
        }
        Command::Verify => Ok(cmd_verify()),
    }
}

fn parse_modality(s: &str) -> Result<StainModality> {
    StainModality::parse(s)
        .ok_or_else(|| Error::Usage(format!("modality must be HE or IHC, got {s:?}")))
}

fn default_artifact(config: &PipelineConfig, stem: &str, modality: StainModality, ext: &str) -> PathBuf {
    config.out_dir.join(format!("{stem}_{}.{ext}", modality.as_str()))
}

fn cmd_ingest(
    config: &PipelineConfig,
    modality: StainModality,
    manifest_path: Option<PathBuf>,
    force_split: bool,
) -> Result<i32> {
    let root = config
        .data_root
        .as_ref()
        .ok_or_else(|| Error::Usage("ingest requires --data-root (or data_root in config)".into()))?;
    if !root.is_dir() {
        return Err(Error::Usage(format!("data root is not a directory: {}", root.display())));
    }
    let pattern = Regex::new(&config.pattern)
        .map_err(|e| Error::Usage(format!("bad label pattern: {e}")))?;
    let scanned = scan_dataset(root, modality, &pattern)?;
    let manifest = if scanned.records.iter().all(|r| r.split.is_some()) && !force_split {
        println!("split: preassigned from directory layout");
        scanned
    } else {
        split_manifest(&scanned, config.train_fraction, config.train.seed, true, force_split)?
    };
    let out = manifest_path.unwrap_or_else(|| default_artifact(config, "manifest", modality, "tsv"));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    manifest.save(&out)?;
    println!("manifest: {} ({} records, {} skipped)", out.display(), manifest.records.len(), manifest.skipped);
    let counts = manifest.class_counts();
    for (score, n) in Her2Score::ALL.iter().zip(counts) {
        println!("  score {:<2} {n}", score.label());
    }
    let (train_n, test_n) = manifest.split_counts();
    println!("  train {train_n} / test {test_n}");
    Ok(0)
}

fn cmd_extract_features(
    config: &PipelineConfig,
    manifest_path: &Path,
    features_path: Option<PathBuf>,
) -> Result<i32> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let out = features_path
        .unwrap_or_else(|| default_artifact(config, "features", manifest.modality, "bin"));
    let backbone = StubBackbone::new(FEATURE_DIM, config.backbone_seed);
    let mut store = FeatureStore::new(FEATURE_DIM);
    for chunk in manifest.records.chunks(config.train.batch_size.max(1)) {
        let mut images = Array4::<f32>::zeros((chunk.len(), SIDE_PX, SIDE_PX, 3));
        for (i, record) in chunk.iter().enumerate() {
            let tensor = normalize(&decode_resize(&record.path, SIDE_PX)?)?;
            images
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&tensor.data);
        }
        let feats = backbone.extract(&images)?;
        for (i, record) in chunk.iter().enumerate() {
            store.insert(record.sample_id.clone(), feats.row(i).to_vec())?;
        }
    }
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    store.save(&out)?;
    println!("features: {} ({} vectors, dim {FEATURE_DIM})", out.display(), store.len());
    Ok(0)
}

fn print_outcome(outcome: &TrainOutcome) {
    for e in &outcome.history.epochs {
        let val = match (e.val_loss, e.val_accuracy) {
            (Some(l), Some(a)) => format!(" val_loss {l:.4} val_acc {a:.4}"),
            _ => String::new(),
        };
        println!(
            "epoch {:>3} train_loss {:.4} train_acc {:.4}{val}",
            e.epoch, e.train_loss, e.train_accuracy
        );
    }
    match &outcome.best {
        Some(best) => println!(
            "best: epoch {} monitored_loss {:.6} -> {}",
            best.epoch,
            best.monitored_loss,
            best.path.display()
        ),
        None => println!("best: no checkpoint written"),
    }
}

fn cmd_train(
    config: &PipelineConfig,
    modality: StainModality,
    manifest_path: &Path,
    features_path: Option<PathBuf>,
    checkpoint_path: Option<PathBuf>,
) -> Result<i32> {
    config.train.validate()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    if manifest.modality != modality {
        return Err(Error::Usage(format!(
            "manifest is {} but --modality is {}",
            manifest.modality.as_str(),
            modality.as_str()
        )));
    }
    let checkpoint =
        checkpoint_path.unwrap_or_else(|| default_artifact(config, "checkpoint", modality, "bin"));
    if let Some(dir) = checkpoint.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let hash = config.config_hash();
    let outcome = if config.use_cached_features {
        let feat_file = features_path
            .unwrap_or_else(|| default_artifact(config, "features", modality, "bin"));
        if !feat_file.exists() {
            return Err(Error::Usage(format!(
                "feature cache not found: {} (run extract-features first)",
                feat_file.display()
            )));
        }
        let store = FeatureStore::load(&feat_file)?;
        let mut head = Head::init(build_head(FEATURE_DIM)?, config.train.seed);
        let train_samples = labeled_samples(&manifest, Split::Train);
        let val_samples = labeled_samples(&manifest, Split::Test);
        let outcome = train_on_cached_features(
            &mut head,
            &store,
            &train_samples,
            (!val_samples.is_empty()).then_some(&val_samples[..]),
            &config.train,
            Some(&checkpoint),
            &hash,
        )?;
        outcome
    } else {
        let mut handle = compose(
            BackboneSpec::inception_v3(),
            Arc::new(StubBackbone::new(FEATURE_DIM, config.backbone_seed)),
            Head::init(build_head(FEATURE_DIM)?, config.train.seed),
            ModelMetadata {
                config_hash: hash.clone(),
                created_at: now_utc(),
                modality: Some(modality),
            },
        )?;
        let policy = config.augment.then(AugmentPolicy::default);
        train(&mut handle, &manifest, Some(&manifest), &config.train, policy, Some(&checkpoint), &hash)?
    };
    let history_path = default_artifact(config, "history", modality, "jsonl");
    outcome.history.save(&history_path)?;
    print_outcome(&outcome);
    println!("history: {}", history_path.display());
    Ok(0)
}

fn cmd_evaluate(
    config: &PipelineConfig,
    modality: StainModality,
    manifest_path: &Path,
    checkpoint_path: &Path,
) -> Result<i32> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let (head, sidecar) = load_checkpoint(checkpoint_path, &build_head(FEATURE_DIM)?)?;
    let handle = compose(
        BackboneSpec::inception_v3(),
        Arc::new(StubBackbone::new(FEATURE_DIM, config.backbone_seed)),
        head,
        ModelMetadata {
            config_hash: config.config_hash(),
            created_at: now_utc(),
            modality: Some(modality),
        },
    )?;
    let predictions = predict_split(&handle, &manifest, Split::Test, config.train.batch_size)?;
    let checkpoint_ref = sidecar.map(|s| CheckpointMeta {
        path: checkpoint_path.to_path_buf(),
        epoch: s.epoch,
        monitored_loss: s.monitored_loss,
        config_hash: s.config_hash,
    });
    let report = full_report(&predictions, Some(modality), checkpoint_ref)?;
    std::fs::create_dir_all(&config.out_dir)?;
    let out = default_artifact(config, "report", modality, "json");
    report.save(&out)?;
    println!("samples: {}", report.n_samples);
    println!("accuracy: {:.4}", report.accuracy);
    for m in &report.per_category {
        println!(
            "  score {:<2} precision {:.4} recall {:.4} f1 {:.4} (n={})",
            m.category, m.precision, m.recall, m.f1, m.support
        );
    }
    println!("report: {}", out.display());
    Ok(0)
}

fn cmd_predict(config: &PipelineConfig, checkpoint_path: &Path, image_path: &Path) -> Result<i32> {
    let (head, _) = load_checkpoint(checkpoint_path, &build_head(FEATURE_DIM)?)?;
    let tensor = normalize(&decode_resize(image_path, SIDE_PX)?)?;
    let mut images = Array4::<f32>::zeros((1, SIDE_PX, SIDE_PX, 3));
    images.index_axis_mut(ndarray::Axis(0), 0).assign(&tensor.data);
    let backbone = StubBackbone::new(FEATURE_DIM, config.backbone_seed);
    let probs = head.infer(&backbone.extract(&images)?)?;
    let row: Vec<f64> = probs.row(0).to_vec();
    let score = Her2Score::from_index(argmax(&row)).expect("4-way output");
    println!(
        "{} {:.6} {:.6} {:.6} {:.6}",
        score.label(),
        row[0],
        row[1],
        row[2],
        row[3]
    );
    Ok(0)
}

fn cmd_report(
    config: &PipelineConfig,
    history_path: &Path,
    accuracy: Option<f64>,
    dataset: &str,
) -> Result<i32> {
    let history = TrainHistory::load(history_path)?;
    let artifacts = curves(&history, &config.out_dir)?;
    println!("curves: {}", artifacts.accuracy_figure.display());
    println!("curves: {}", artifacts.loss_figure.display());
    let measured: Vec<ComparisonRow> = accuracy
        .map(|a| ComparisonRow {
            method_name: "Inception-V3 + head (this work)".into(),
            dataset_name: dataset.to_string(),
            accuracy: a,
        })
        .into_iter()
        .collect();
    let table = comparison_table(&measured, true)?;
    let table_path = config.out_dir.join("comparison.md");
    std::fs::write(&table_path, &table)?;
    print!("{table}");
    println!("table: {}", table_path.display());
    Ok(0)
}

fn cmd_verify() -> i32 {
    let results = verify::run_all();
    let mut failed = 0usize;
    for r in &results {
        let status = if r.passed { "pass" } else { "FAIL" };
        println!("[{status}] {:<36} {}", r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    if failed == 0 {
        println!("verify: all {} checks passed", results.len());
        0
    } else {
        println!("verify: {failed} of {} checks FAILED", results.len());
        1
    }
}

fn now_utc() -> String {
    // seconds since the epoch; avoids a clock/formatting dependency
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}
