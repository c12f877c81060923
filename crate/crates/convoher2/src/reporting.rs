//! Evaluation artifacts: confusion matrices, per-category metrics, training
//! curves, and the comparison table.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::ingest::{StainModality, NUM_CLASSES};
use crate::trainer::{CheckpointMeta, PredictionRow, TrainHistory};
use crate::{Error, Result};

/// 4x4 count matrix, rows = true category, columns = predicted.
#[derive(Debug, Clone, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..NUM_CLASSES).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sum(&self, k: usize) -> usize {
        self.counts[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> usize {
        (0..NUM_CLASSES).map(|r| self.counts[r][k]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(predictions.len(), labels.len()));
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &t) in predictions.iter().zip(labels) {
        if p >= NUM_CLASSES {
            return Err(Error::IndexOutOfRange(p));
        }
        if t >= NUM_CLASSES {
            return Err(Error::IndexOutOfRange(t));
        }
        m.counts[t][p] += 1;
    }
    Ok(m)
}

/// Precision/recall/F1 for one category. Zero-denominator cases report 0
/// with the matching `*_undefined` flag set.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CategoryMetrics {
    pub category: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

pub fn per_category_metrics(matrix: &ConfusionMatrix) -> Vec<CategoryMetrics> {
    let labels = ["0", "1+", "2+", "3+"];
    (0..NUM_CLASSES)
        .map(|k| {
            let tp = matrix.counts[k][k] as f64;
            let col = matrix.col_sum(k) as f64;
            let row = matrix.row_sum(k) as f64;
            let precision_undefined = col == 0.0;
            let recall_undefined = row == 0.0;
            let precision = if precision_undefined { 0.0 } else { tp / col };
            let recall = if recall_undefined { 0.0 } else { tp / row };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            CategoryMetrics {
                category: labels[k].into(),
                precision,
                recall,
                f1,
                support: matrix.row_sum(k),
                precision_undefined,
                recall_undefined,
            }
        })
        .collect()
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvaluationReport {
    pub modality: Option<StainModality>,
    pub n_samples: usize,
    pub accuracy: f64,
    pub per_category: Vec<CategoryMetrics>,
    pub matrix: ConfusionMatrix,
    pub checkpoint_ref: Option<CheckpointMeta>,
}

/// Build the full evaluation report from infer-mode predictions.
pub fn full_report(
    predictions: &[PredictionRow],
    modality: Option<StainModality>,
    checkpoint_ref: Option<CheckpointMeta>,
) -> Result<EvaluationReport> {
    if predictions.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let pred: Vec<usize> = predictions.iter().map(|r| r.predicted_index).collect();
    let truth: Vec<usize> = predictions.iter().map(|r| r.true_index).collect();
    let matrix = confusion(&pred, &truth)?;
    Ok(EvaluationReport {
        modality,
        n_samples: matrix.total(),
        accuracy: matrix.accuracy(),
        per_category: per_category_metrics(&matrix),
        matrix,
        checkpoint_ref,
    })
}

impl EvaluationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serialize");
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Paths of the artifacts written by [`curves`].
#[derive(Debug, Clone)]
pub struct CurveArtifacts {
    pub accuracy_figure: PathBuf,
    pub loss_figure: PathBuf,
    pub series_files: Vec<PathBuf>,
}

/// Write accuracy and loss figures plus the raw series data files.
pub fn curves(history: &TrainHistory, out_dir: &Path) -> Result<CurveArtifacts> {
    if history.epochs.is_empty() {
        return Err(Error::EmptyHistory);
    }
    std::fs::create_dir_all(out_dir)?;
    let mut series_files = Vec::new();
    let series = |f: &dyn Fn(&crate::trainer::EpochMetrics) -> Option<f64>| -> Vec<(usize, f64)> {
        history
            .epochs
            .iter()
            .filter_map(|e| f(e).map(|v| (e.epoch, v)))
            .collect()
    };
    let train_acc = series(&|e| Some(e.train_accuracy));
    let val_acc = series(&|e| e.val_accuracy);
    let train_loss = series(&|e| Some(e.train_loss));
    let val_loss = series(&|e| e.val_loss);
    for (name, data) in [
        ("accuracy_train", &train_acc),
        ("accuracy_val", &val_acc),
        ("loss_train", &train_loss),
        ("loss_val", &val_loss),
    ] {
        if data.is_empty() {
            continue;
        }
        let p = out_dir.join(format!("{name}.tsv"));
        let mut text = String::new();
        for (epoch, v) in data {
            text.push_str(&format!("{epoch}\t{v}\n"));
        }
        std::fs::write(&p, text)?;
        series_files.push(p);
    }
    let accuracy_figure = out_dir.join("accuracy.png");
    draw_figure(&accuracy_figure, "Accuracy", "accuracy", &train_acc, &val_acc)?;
    let loss_figure = out_dir.join("loss.png");
    draw_figure(&loss_figure, "Loss", "loss", &train_loss, &val_loss)?;
    Ok(CurveArtifacts { accuracy_figure, loss_figure, series_files })
}

/// The ab_glyph text backend has no system font discovery; register a font
/// from disk once per process before any text is drawn.
fn ensure_font() -> Result<()> {
    use std::sync::OnceLock;
    static FONT: OnceLock<std::result::Result<(), String>> = OnceLock::new();
    FONT.get_or_init(|| {
        let candidates = [
            "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
            "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
        ];
        for path in candidates {
            if let Ok(bytes) = std::fs::read(path) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                return plotters::style::register_font(
                    "sans-serif",
                    plotters::style::FontStyle::Normal,
                    leaked,
                )
                .map_err(|_| format!("invalid font file {path}"));
            }
        }
        Err("no usable TTF font found".into())
    })
    .clone()
    .map_err(Error::Figure)
}

fn draw_figure(
    path: &Path,
    title: &str,
    y_label: &str,
    train: &[(usize, f64)],
    val: &[(usize, f64)],
) -> Result<()> {
    ensure_font()?;
    let root = BitMapBackend::new(path, (800, 600)).into_drawing_area();
    let fig = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        root.fill(&WHITE)?;
        let x_max = train.iter().chain(val).map(|&(e, _)| e).max().unwrap_or(1).max(1);
        let y_vals: Vec<f64> = train.iter().chain(val).map(|&(_, v)| v).collect();
        let y_min = y_vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let y_max = y_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((y_max - y_min) * 0.1).max(1e-3);
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 28))
            .margin(12)
            .x_label_area_size(44)
            .y_label_area_size(60)
            .build_cartesian_2d(1f64..(x_max as f64 + 0.5), (y_min - pad)..(y_max + pad))?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .y_desc(y_label)
            .draw()?;
        chart
            .draw_series(LineSeries::new(
                train.iter().map(|&(e, v)| (e as f64, v)),
                &BLUE,
            ))?
            .label("train")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], BLUE));
        if !val.is_empty() {
            chart
                .draw_series(LineSeries::new(
                    val.iter().map(|&(e, v)| (e as f64, v)),
                    &RED,
                ))?
                .label("validation")
                .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], RED));
        }
        // single-point histories still need visible marks
        chart.draw_series(train.iter().map(|&(e, v)| Circle::new((e as f64, v), 3, BLUE.filled())))?;
        if !val.is_empty() {
            chart.draw_series(val.iter().map(|&(e, v)| Circle::new((e as f64, v), 3, RED.filled())))?;
        }
        chart.configure_series_labels().border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    };
    fig().map_err(|e| Error::Figure(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ComparisonRow {
    pub method_name: String,
    pub dataset_name: String,
    pub accuracy: f64,
}

/// Published baselines reproduced as reported (measured on differing
/// datasets; not re-evaluated here).
pub fn baseline_rows() -> Vec<ComparisonRow> {
    vec![
        ComparisonRow { method_name: "SVM".into(), dataset_name: "MRI images".into(), accuracy: 0.795 },
        ComparisonRow {
            method_name: "DenseNet".into(),
            dataset_name: "Ultrasound images".into(),
            accuracy: 0.8056,
        },
        ComparisonRow {
            method_name: "HASHI algorithm".into(),
            dataset_name: "HER2SC".into(),
            accuracy: 0.833,
        },
    ]
}

/// Render the comparison table (baselines plus measured rows) as text.
pub fn comparison_table(measured: &[ComparisonRow], include_baselines: bool) -> Result<String> {
    let mut rows = if include_baselines { baseline_rows() } else { Vec::new() };
    rows.extend(measured.iter().cloned());
    if rows.is_empty() {
        return Err(Error::EmptyComparison);
    }
    let mut out = String::from("| Model | Dataset | Accuracy |\n|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {:.2}% |\n",
            r.method_name,
            r.dataset_name,
            r.accuracy * 100.0
        ));
    }
    Ok(out)
}
