//! Frozen feature extractors and the on-disk feature cache.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// A frozen image-to-feature extractor. Implementations must be
/// deterministic: the same image always maps to the same feature vector.
pub trait Backbone: Send + Sync {
    fn feature_dim(&self) -> usize;
    /// N x H x W x C normalized images -> N x feature_dim features.
    fn extract(&self, images: &Array4<f32>) -> Result<Array2<f64>>;
    /// Digest of the (frozen) backbone state, for freeze checks.
    fn checksum(&self) -> String;
}

/// Deterministic stand-in backbone: a fixed-seed sparse signed projection
/// from the flattened image to `feature_dim` outputs, squashed by tanh.
/// Satisfies the frozen-backbone contract without pretrained weights.
pub struct StubBackbone {
    feature_dim: usize,
    seed: u64,
    /// Per output feature: (flat pixel index, sign) taps.
    taps: Vec<Vec<(u32, f32)>>,
    input_len: usize,
}

const TAPS_PER_FEATURE: usize = 64;

impl StubBackbone {
    pub fn new(feature_dim: usize, seed: u64) -> Self {
        // Taps are drawn for the full 256x256x3 input; smaller inputs wrap.
        let input_len = 256 * 256 * 3;
        let mut taps = Vec::with_capacity(feature_dim);
        for j in 0..feature_dim {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(j as u64));
            let mut feature_taps = Vec::with_capacity(TAPS_PER_FEATURE);
            for _ in 0..TAPS_PER_FEATURE {
                let idx = rng.gen_range(0..input_len as u32);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                feature_taps.push((idx, sign));
            }
            taps.push(feature_taps);
        }
        StubBackbone { feature_dim, seed, taps, input_len }
    }
}

impl Backbone for StubBackbone {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn extract(&self, images: &Array4<f32>) -> Result<Array2<f64>> {
        let n = images.shape()[0];
        let pixels = images.len() / n.max(1);
        if pixels == 0 {
            return Err(Error::ShapeMismatch("empty image batch".into()));
        }
        let flat = images
            .as_slice()
            .ok_or_else(|| Error::ShapeMismatch("non-contiguous image batch".into()))?;
        let scale = 1.0 / (TAPS_PER_FEATURE as f64).sqrt();
        let mut out = Array2::<f64>::zeros((n, self.feature_dim));
        for i in 0..n {
            let img = &flat[i * pixels..(i + 1) * pixels];
            for (j, feature_taps) in self.taps.iter().enumerate() {
                let mut acc = 0.0f64;
                for &(idx, sign) in feature_taps {
                    acc += sign as f64 * img[idx as usize % pixels] as f64;
                }
                out[[i, j]] = (acc * scale).tanh();
            }
        }
        Ok(out)
    }

    fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(self.feature_dim.to_le_bytes());
        hasher.update(self.input_len.to_le_bytes());
        for feature_taps in &self.taps {
            for &(idx, sign) in feature_taps {
                hasher.update(idx.to_le_bytes());
                hasher.update(sign.to_le_bytes());
            }
        }
        super::head::hex_digest(hasher)
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"CVF1";

/// Precomputed backbone features keyed by sample id. The frozen backbone
/// makes these constant across training, so the head can retrain from the
/// cache without touching images.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    pub dim: usize,
    features: HashMap<String, Vec<f64>>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        FeatureStore { dim, features: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn insert(&mut self, sample_id: String, feature: Vec<f64>) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "feature for {sample_id:?} has {} values, store dim is {}",
                feature.len(),
                self.dim
            )));
        }
        self.features.insert(sample_id, feature);
        Ok(())
    }

    pub fn get(&self, sample_id: &str) -> Result<&[f64]> {
        self.features
            .get(sample_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingFeature(sample_id.to_string()))
    }

    pub fn contains(&self, sample_id: &str) -> bool {
        self.features.contains_key(sample_id)
    }

    /// Gather rows for the given ids in order.
    pub fn gather(&self, ids: &[String]) -> Result<Array2<f64>> {
        let mut out = Array2::<f64>::zeros((ids.len(), self.dim));
        for (i, id) in ids.iter().enumerate() {
            let row = self.get(id)?;
            out.row_mut(i)
                .iter_mut()
                .zip(row)
                .for_each(|(dst, &src)| *dst = src);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(FEATURE_MAGIC)?;
        f.write_all(&(self.dim as u64).to_le_bytes())?;
        f.write_all(&(self.features.len() as u64).to_le_bytes())?;
        let mut ids: Vec<&String> = self.features.keys().collect();
        ids.sort();
        for id in ids {
            let bytes = id.as_bytes();
            f.write_all(&(bytes.len() as u32).to_le_bytes())?;
            f.write_all(bytes)?;
            for v in &self.features[id] {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(Error::ShapeMismatch("not a feature cache file".into()));
        }
        let mut u64buf = [0u8; 8];
        f.read_exact(&mut u64buf)?;
        let dim = u64::from_le_bytes(u64buf) as usize;
        f.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        let mut store = FeatureStore::new(dim);
        for _ in 0..count {
            let mut u32buf = [0u8; 4];
            f.read_exact(&mut u32buf)?;
            let id_len = u32::from_le_bytes(u32buf) as usize;
            let mut id_bytes = vec![0u8; id_len];
            f.read_exact(&mut id_bytes)?;
            let id = String::from_utf8(id_bytes)
                .map_err(|_| Error::ShapeMismatch("bad id encoding in feature cache".into()))?;
            let mut row = Vec::with_capacity(dim);
            for _ in 0..dim {
                f.read_exact(&mut u64buf)?;
                row.push(f64::from_le_bytes(u64buf));
            }
            store.features.insert(id, row);
        }
        Ok(store)
    }
}
