//! Frozen-backbone + trainable-head model: specs, parameter accounting,
//! forward inference, feature extraction, and checkpoints.

mod backbone;
mod checkpoint;
mod head;

pub use backbone::{Backbone, FeatureStore, StubBackbone};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointSidecar};
pub use head::{
    argmax, batch_accuracy, mean_cross_entropy, Activation, BatchNormLayer, DenseLayer, Head,
    HeadCache, HeadGradients, NamedArray, Stage,
};

use std::sync::Arc;

use ndarray::{Array2, Array4};

use crate::ingest::{StainModality, NUM_CLASSES};
use crate::preprocess::Batch;
use crate::{Error, Result};

pub const FEATURE_DIM: usize = 2048;
/// Parameter count of the pretrained feature extractor (classifier removed,
/// pooled 2048-d output), consumed as a black box.
pub const BACKBONE_PARAMS: usize = 21_802_784;

/// Identity of the pretrained feature extractor.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneSpec {
    pub architecture_id: String,
    pub pretrain_corpus: String,
    pub feature_dim: usize,
    pub frozen: bool,
}

impl BackboneSpec {
    pub fn inception_v3() -> Self {
        BackboneSpec {
            architecture_id: "inception_v3".into(),
            pretrain_corpus: "imagenet".into(),
            feature_dim: FEATURE_DIM,
            frozen: true,
        }
    }

    pub fn param_count(&self) -> usize {
        if self.architecture_id == "inception_v3" {
            BACKBONE_PARAMS
        } else {
            0
        }
    }
}

/// One layer of the classifier head.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LayerSpec {
    BatchNorm { dim: usize },
    Dense { input: usize, output: usize, activation: Activation },
}

/// The classifier head topology: four (batch norm, dense) stages, hidden
/// activations ReLU, output softmax over the four score stages.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HeadSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

/// Build the head layer sequence for a given feature width.
///
/// At the reference width 2048 the sequence is BN(2048), Dense(2048->2048),
/// BN(2048), Dense(2048->1536), BN(1536), Dense(1536->1536), BN(1536),
/// Dense(1536->4); other widths scale the hidden sizes proportionally for
/// test use.
pub fn build_head(input_dim: usize) -> Result<HeadSpec> {
    if input_dim < 1 {
        return Err(Error::InvalidDim(input_dim));
    }
    let wide = input_dim;
    let narrow = (input_dim * 3 / 4).max(1);
    let layers = vec![
        LayerSpec::BatchNorm { dim: wide },
        LayerSpec::Dense { input: wide, output: wide, activation: Activation::Relu },
        LayerSpec::BatchNorm { dim: wide },
        LayerSpec::Dense { input: wide, output: narrow, activation: Activation::Relu },
        LayerSpec::BatchNorm { dim: narrow },
        LayerSpec::Dense { input: narrow, output: narrow, activation: Activation::Relu },
        LayerSpec::BatchNorm { dim: narrow },
        LayerSpec::Dense { input: narrow, output: NUM_CLASSES, activation: Activation::Softmax },
    ];
    Ok(HeadSpec { input_dim, layers })
}

impl HeadSpec {
    pub fn output_dim(&self) -> usize {
        NUM_CLASSES
    }

    /// Layer widths (input plus each dense output), the topology fingerprint
    /// used by checkpoint compatibility checks.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        for layer in &self.layers {
            if let LayerSpec::Dense { output, .. } = layer {
                w.push(*output);
            }
        }
        w
    }
}

/// Per-layer parameter accounting row.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct LayerCount {
    pub layer_name: String,
    pub output_shape: Vec<usize>,
    pub param_count: usize,
    pub trainable_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
    pub layers: Vec<LayerCount>,
}

/// Exact integer parameter accounting for the composed model.
///
/// Dense(a->b) contributes a*b+b; BatchNorm(d) contributes 4d of which 2d
/// (gamma, beta) are trainable; the backbone and the flatten row contribute
/// only non-trainable and zero parameters respectively.
pub fn count_params(backbone: &BackboneSpec, head: &HeadSpec) -> ParamCounts {
    let mut layers = Vec::new();
    layers.push(LayerCount {
        layer_name: format!("{} (Functional)", backbone.architecture_id),
        output_shape: vec![backbone.feature_dim],
        param_count: backbone.param_count(),
        trainable_count: 0,
    });
    layers.push(LayerCount {
        layer_name: "flatten (Flatten)".into(),
        output_shape: vec![head.input_dim],
        param_count: 0,
        trainable_count: 0,
    });
    layers.extend(count_head_layers(head));
    let total = layers.iter().map(|l| l.param_count).sum();
    let trainable = layers.iter().map(|l| l.trainable_count).sum();
    ParamCounts { total, trainable, non_trainable: total - trainable, layers }
}

/// Accounting rows for the head alone.
pub fn count_head_layers(head: &HeadSpec) -> Vec<LayerCount> {
    let mut rows = Vec::new();
    let mut bn_idx = 0usize;
    let mut dense_idx = 0usize;
    for layer in &head.layers {
        match layer {
            LayerSpec::BatchNorm { dim } => {
                rows.push(LayerCount {
                    layer_name: format!("batch_normalization_{bn_idx} (BatchNormalization)"),
                    output_shape: vec![*dim],
                    param_count: 4 * dim,
                    trainable_count: 2 * dim,
                });
                bn_idx += 1;
            }
            LayerSpec::Dense { input, output, .. } => {
                rows.push(LayerCount {
                    layer_name: format!("dense_{dense_idx} (Dense)"),
                    output_shape: vec![*output],
                    param_count: input * output + output,
                    trainable_count: input * output + output,
                });
                dense_idx += 1;
            }
        }
    }
    rows
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelMetadata {
    pub config_hash: String,
    pub created_at: String,
    pub modality: Option<StainModality>,
}

/// A composed model: frozen feature extractor plus trainable head.
pub struct ModelHandle {
    pub backbone_spec: BackboneSpec,
    pub backbone: Arc<dyn Backbone>,
    pub head: Head,
    pub metadata: ModelMetadata,
}

/// Forward-pass mode: batch statistics (train) or running statistics (infer)
/// in the batch-norm layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Infer,
}

/// Compose a frozen backbone realization with a head realization.
pub fn compose(
    spec: BackboneSpec,
    backbone: Arc<dyn Backbone>,
    head: Head,
    metadata: ModelMetadata,
) -> Result<ModelHandle> {
    if !spec.frozen {
        return Err(Error::MissingWeights(format!(
            "{}: only frozen backbones are supported",
            spec.architecture_id
        )));
    }
    if spec.feature_dim != backbone.feature_dim() {
        return Err(Error::DimMismatch { backbone: backbone.feature_dim(), head: spec.feature_dim });
    }
    if backbone.feature_dim() != head.spec.input_dim {
        return Err(Error::DimMismatch {
            backbone: backbone.feature_dim(),
            head: head.spec.input_dim,
        });
    }
    Ok(ModelHandle { backbone_spec: spec, backbone, head, metadata })
}

impl ModelHandle {
    /// End-to-end forward: images -> frozen features -> head probabilities.
    pub fn forward(&self, batch: &Batch, mode: ForwardMode) -> Result<Array2<f64>> {
        let feats = self.extract_features(batch)?;
        match mode {
            ForwardMode::Infer => self.head.infer(&feats),
            ForwardMode::Train => Ok(self.head.train_forward(&feats)?.0),
        }
    }

    pub fn extract_features(&self, batch: &Batch) -> Result<Array2<f64>> {
        self.extract_features_raw(&batch.images)
    }

    pub fn extract_features_raw(&self, images: &Array4<f32>) -> Result<Array2<f64>> {
        let feats = self.backbone.extract(images)?;
        if feats.ncols() != self.head.spec.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "backbone produced {} features, head expects {}",
                feats.ncols(),
                self.head.spec.input_dim
            )));
        }
        Ok(feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::SIDE_PX;
    use ndarray::Array4;

    #[test]
    fn head_spec_reference_topology() {
        let h = build_head(FEATURE_DIM).unwrap();
        assert_eq!(h.layers.len(), 8);
        assert_eq!(h.output_dim(), 4);
        assert_eq!(h.widths(), vec![2048, 2048, 1536, 1536, 4]);
        assert!(matches!(
            h.layers.last(),
            Some(LayerSpec::Dense { output: 4, activation: Activation::Softmax, .. })
        ));
    }

    #[test]
    fn head_spec_rejects_zero_dim() {
        assert!(matches!(build_head(0), Err(Error::InvalidDim(0))));
    }

    #[test]
    fn first_bn_has_8192_params() {
        let h = build_head(FEATURE_DIM).unwrap();
        let rows = count_head_layers(&h);
        assert_eq!(rows[0].param_count, 8192);
        assert_eq!(rows[0].trainable_count, 4096);
    }

    #[test]
    fn test_scale_head_counts() {
        let h = build_head(8).unwrap();
        let rows = count_head_layers(&h);
        // BN(8): 32 params; Dense(8->8): 72 params.
        assert_eq!(rows[0].param_count, 32);
        assert_eq!(rows[1].param_count, 72);
        assert_eq!(h.widths(), vec![8, 8, 6, 6, 4]);
    }

    #[test]
    fn full_model_counts_match_published_summary() {
        let counts = count_params(&BackboneSpec::inception_v3(), &build_head(FEATURE_DIM).unwrap());
        assert_eq!(counts.total, 31_542_052);
        assert_eq!(counts.trainable, 9_724_932);
        assert_eq!(counts.non_trainable, 21_817_120);
        let params: Vec<usize> = counts.layers.iter().map(|l| l.param_count).collect();
        assert_eq!(
            params,
            vec![21_802_784, 0, 8192, 4_196_352, 8192, 3_147_264, 6144, 2_360_832, 6144, 6148]
        );
    }

    #[test]
    fn dense_2048_to_1536_row() {
        let counts = count_params(&BackboneSpec::inception_v3(), &build_head(FEATURE_DIM).unwrap());
        let row = counts.layers.iter().find(|l| l.layer_name.starts_with("dense_1 ")).unwrap();
        assert_eq!(row.param_count, 3_147_264);
    }

    #[test]
    fn trainable_identity_from_layer_formulas() {
        // dense rows plus the gamma/beta halves of the BN rows.
        let dense_sum = 4_196_352 + 3_147_264 + 2_360_832 + 6148;
        let bn_trainable = 2 * (2048 + 2048 + 1536 + 1536);
        assert_eq!(dense_sum + bn_trainable, 9_724_932);
    }

    fn stub_handle(seed: u64) -> ModelHandle {
        let spec = BackboneSpec::inception_v3();
        let backbone = Arc::new(StubBackbone::new(FEATURE_DIM, seed));
        let head = Head::init(build_head(FEATURE_DIM).unwrap(), 1);
        compose(
            spec,
            backbone,
            head,
            ModelMetadata { config_hash: "t".into(), created_at: "t".into(), modality: None },
        )
        .unwrap()
    }

    #[test]
    fn compose_rejects_unfrozen_and_dim_mismatch() {
        let mut spec = BackboneSpec::inception_v3();
        spec.frozen = false;
        let backbone = Arc::new(StubBackbone::new(FEATURE_DIM, 0));
        let head = Head::init(build_head(FEATURE_DIM).unwrap(), 1);
        let meta = ModelMetadata { config_hash: "t".into(), created_at: "t".into(), modality: None };
        assert!(matches!(
            compose(spec, backbone.clone(), head, meta.clone()),
            Err(Error::MissingWeights(_))
        ));
        let small_head = Head::init(build_head(8).unwrap(), 1);
        assert!(matches!(
            compose(BackboneSpec::inception_v3(), backbone, small_head, meta),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn forward_rows_are_probabilities() {
        let handle = stub_handle(3);
        let batch = Batch {
            images: Array4::from_elem((3, SIDE_PX, SIDE_PX, 3), 0.1f32),
            labels: ndarray::Array2::zeros((3, 4)),
            record_ids: vec!["a".into(), "b".into(), "c".into()],
        };
        let probs = handle.forward(&batch, ForwardMode::Infer).unwrap();
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn infer_is_batch_size_independent() {
        let handle = stub_handle(5);
        let mut images = Array4::from_elem((8, SIDE_PX, SIDE_PX, 3), 0.0f32);
        for i in 0..8 {
            for j in 0..64 {
                images[[i, j / 8, j % 8, 0]] = (i * 64 + j) as f32 / 512.0 - 0.5;
            }
        }
        let big = Batch {
            images: images.clone(),
            labels: ndarray::Array2::zeros((8, 4)),
            record_ids: (0..8).map(|i| i.to_string()).collect(),
        };
        let solo = Batch {
            images: images.slice(ndarray::s![0..1, .., .., ..]).to_owned(),
            labels: ndarray::Array2::zeros((1, 4)),
            record_ids: vec!["0".into()],
        };
        let all = handle.forward(&big, ForwardMode::Infer).unwrap();
        let one = handle.forward(&solo, ForwardMode::Infer).unwrap();
        for k in 0..4 {
            assert!((all[[0, k]] - one[[0, k]]).abs() < 1e-5);
        }
    }

    #[test]
    fn feature_extraction_is_deterministic() {
        let handle = stub_handle(7);
        let images = Array4::from_shape_fn((2, SIDE_PX, SIDE_PX, 3), |(n, i, j, c)| {
            ((n + i + j + c) % 7) as f32 / 7.0
        });
        let a = handle.extract_features_raw(&images).unwrap();
        let b = handle.extract_features_raw(&images).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ncols(), FEATURE_DIM);
    }
}
