//! Image decoding, normalization, augmentation, and batch assembly.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ingest::{DatasetManifest, Her2Score, ImageRecord, Split, NUM_CLASSES};
use crate::{Error, Result};

pub const SIDE_PX: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeTag {
    Raw0To255,
    NormalizedM1To1,
}

/// H x W x 3 image array carrying its value-range convention.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f32>,
    pub range_tag: RangeTag,
}

impl ImageTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }
}

/// One-hot target over the four score stages.
pub type LabelVector = Array1<f32>;

/// Parallel arrays of normalized images, one-hot labels, and sample ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array4<f32>,
    pub labels: Array2<f32>,
    pub record_ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct AugmentPolicy {
    pub rotation_degrees: Vec<u32>,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub scale_jitter: (f32, f32),
    pub enabled: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rotation_degrees: vec![0, 90, 180, 270],
            horizontal_flip: true,
            vertical_flip: false,
            scale_jitter: (0.9, 1.1),
            enabled: true,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy { enabled: false, ..Default::default() }
    }
}

/// Decode an image file and resize it to `side_px` x `side_px` x 3 with
/// bilinear resampling. Output values stay in [0, 255].
pub fn decode_resize(path: &Path, side_px: usize) -> Result<ImageTensor> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{}", path.display()),
        )));
    }
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let img = img.resize_exact(side_px as u32, side_px as u32, FilterType::Triangle);
    let rgb = img.to_rgb8();
    let mut data = Array3::<f32>::zeros((side_px, side_px, 3));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[[y as usize, x as usize, c]] = px.0[c] as f32;
        }
    }
    Ok(ImageTensor { data, range_tag: RangeTag::Raw0To255 })
}

/// Affine map x -> x/127.5 - 1, the input convention of the backbone family.
pub fn normalize(img: &ImageTensor) -> Result<ImageTensor> {
    if img.range_tag != RangeTag::Raw0To255 {
        return Err(Error::WrongRangeTag);
    }
    Ok(ImageTensor {
        data: img.data.mapv(|x| x / 127.5 - 1.0),
        range_tag: RangeTag::NormalizedM1To1,
    })
}

pub fn one_hot(score: Her2Score) -> LabelVector {
    let mut v = Array1::zeros(NUM_CLASSES);
    v[score.index()] = 1.0;
    v
}

fn rotate90(data: &Array3<f32>, quarter_turns: u32) -> Array3<f32> {
    let (h, w, c) = (data.shape()[0], data.shape()[1], data.shape()[2]);
    match quarter_turns % 4 {
        0 => data.clone(),
        1 => Array3::from_shape_fn((w, h, c), |(i, j, k)| data[[h - 1 - j, i, k]]),
        2 => Array3::from_shape_fn((h, w, c), |(i, j, k)| data[[h - 1 - i, w - 1 - j, k]]),
        _ => Array3::from_shape_fn((w, h, c), |(i, j, k)| data[[j, w - 1 - i, k]]),
    }
}

fn flip_h(data: &Array3<f32>) -> Array3<f32> {
    let (h, w, c) = (data.shape()[0], data.shape()[1], data.shape()[2]);
    Array3::from_shape_fn((h, w, c), |(i, j, k)| data[[i, w - 1 - j, k]])
}

fn flip_v(data: &Array3<f32>) -> Array3<f32> {
    let (h, w, c) = (data.shape()[0], data.shape()[1], data.shape()[2]);
    Array3::from_shape_fn((h, w, c), |(i, j, k)| data[[h - 1 - i, j, k]])
}

/// Zoom about the image center by factor `s`, sampling bilinearly with edge
/// clamping; output keeps the input shape. s = 1 is exact identity.
fn center_zoom(data: &Array3<f32>, s: f32) -> Array3<f32> {
    if (s - 1.0).abs() < 1e-7 {
        return data.clone();
    }
    let (h, w, c) = (data.shape()[0], data.shape()[1], data.shape()[2]);
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    Array3::from_shape_fn((h, w, c), |(i, j, k)| {
        let sy = cy + (i as f32 - cy) / s;
        let sx = cx + (j as f32 - cx) / s;
        let sy = sy.clamp(0.0, h as f32 - 1.0);
        let sx = sx.clamp(0.0, w as f32 - 1.0);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
        let top = data[[y0, x0, k]] * (1.0 - fx) + data[[y0, x1, k]] * fx;
        let bot = data[[y1, x0, k]] * (1.0 - fx) + data[[y1, x1, k]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Apply one sampled rotation, optional flips, and scale jitter. The range
/// tag is preserved; a disabled policy returns the input unchanged.
pub fn augment(img: &ImageTensor, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> ImageTensor {
    if !policy.enabled {
        return img.clone();
    }
    let mut data = if policy.rotation_degrees.is_empty() {
        img.data.clone()
    } else {
        let deg = policy.rotation_degrees[rng.gen_range(0..policy.rotation_degrees.len())];
        rotate90(&img.data, deg / 90)
    };
    if policy.horizontal_flip && rng.gen_bool(0.5) {
        data = flip_h(&data);
    }
    if policy.vertical_flip && rng.gen_bool(0.5) {
        data = flip_v(&data);
    }
    let (lo, hi) = policy.scale_jitter;
    if hi > lo {
        let s = rng.gen_range(lo..=hi);
        data = center_zoom(&data, s);
    } else if (lo - 1.0).abs() > 1e-7 {
        data = center_zoom(&data, lo);
    }
    ImageTensor { data, range_tag: img.range_tag }
}

/// Lazy per-batch loader over one split of a manifest.
///
/// Every record appears exactly once per pass; the final partial batch is
/// emitted. Train passes shuffle with the given seed, test passes keep
/// manifest order. Augmentation applies only when a policy is supplied.
pub struct BatchStream<'a> {
    records: Vec<&'a ImageRecord>,
    batch_size: usize,
    cursor: usize,
    policy: Option<AugmentPolicy>,
    rng: ChaCha8Rng,
    side_px: usize,
}

impl<'a> BatchStream<'a> {
    pub fn num_batches(&self) -> usize {
        self.records.len().div_ceil(self.batch_size)
    }
}

impl<'a> Iterator for BatchStream<'a> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.records.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.records.len());
        let chunk = &self.records[self.cursor..end];
        self.cursor = end;
        Some(load_batch(chunk, self.policy.as_ref(), &mut self.rng, self.side_px))
    }
}

fn load_batch(
    records: &[&ImageRecord],
    policy: Option<&AugmentPolicy>,
    rng: &mut ChaCha8Rng,
    side_px: usize,
) -> Result<Batch> {
    let n = records.len();
    let mut images = Array4::<f32>::zeros((n, side_px, side_px, 3));
    let mut labels = Array2::<f32>::zeros((n, NUM_CLASSES));
    let mut ids = Vec::with_capacity(n);
    for (i, rec) in records.iter().enumerate() {
        let raw = decode_resize(&rec.path, side_px)?;
        let img = match policy {
            Some(p) => augment(&raw, p, rng),
            None => raw,
        };
        let norm = normalize(&img)?;
        images.index_axis_mut(Axis(0), i).assign(&norm.data);
        labels.row_mut(i).assign(&one_hot(rec.score));
        ids.push(rec.sample_id.clone());
    }
    Ok(Batch { images, labels, record_ids: ids })
}

/// Build the per-epoch batch stream for one split of a manifest.
pub fn make_batches<'a>(
    manifest: &'a DatasetManifest,
    split: Split,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    policy: Option<AugmentPolicy>,
) -> Result<BatchStream<'a>> {
    let mut records = manifest.records_in(split);
    if records.is_empty() {
        return Err(Error::EmptySplit(split.as_str().to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed.unwrap_or(0));
    if shuffle_seed.is_some() {
        records.shuffle(&mut rng);
    }
    Ok(BatchStream {
        records,
        batch_size: batch_size.max(1),
        cursor: 0,
        policy,
        rng,
        side_px: SIDE_PX,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::StainModality;

    fn const_tensor(value: f32) -> ImageTensor {
        ImageTensor {
            data: Array3::from_elem((8, 8, 3), value),
            range_tag: RangeTag::Raw0To255,
        }
    }

    #[test]
    fn decode_resizes_large_source() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.png");
        image::RgbImage::from_pixel(1024, 1024, image::Rgb([50, 100, 150]))
            .save(&p)
            .unwrap();
        let t = decode_resize(&p, 256).unwrap();
        assert_eq!(t.shape(), (256, 256, 3));
        assert_eq!(t.range_tag, RangeTag::Raw0To255);
    }

    #[test]
    fn decode_constant_is_constant() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        image::RgbImage::from_pixel(256, 256, image::Rgb([128, 128, 128]))
            .save(&p)
            .unwrap();
        let t = decode_resize(&p, 256).unwrap();
        assert!(t.data.iter().all(|&x| x == 128.0));
    }

    #[test]
    fn decode_truncated_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        assert!(matches!(decode_resize(&p, 256), Err(Error::Decode { .. })));
        assert!(matches!(
            decode_resize(&dir.path().join("missing.png"), 256),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let t = const_tensor(0.0);
        assert_eq!(normalize(&t).unwrap().data[[0, 0, 0]], -1.0);
        assert_eq!(normalize(&const_tensor(255.0)).unwrap().data[[0, 0, 0]], 1.0);
        assert_eq!(normalize(&const_tensor(127.5)).unwrap().data[[0, 0, 0]], 0.0);
        let v = normalize(&const_tensor(64.0)).unwrap().data[[3, 3, 1]];
        assert!((v - (64.0 / 127.5 - 1.0)).abs() < 1e-6);
        assert!((v - (-0.49804)).abs() < 1e-5);
    }

    #[test]
    fn normalize_rejects_double_application() {
        let n = normalize(&const_tensor(10.0)).unwrap();
        assert!(matches!(normalize(&n), Err(Error::WrongRangeTag)));
    }

    #[test]
    fn one_hot_definition() {
        assert_eq!(one_hot(Her2Score::Zero).to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(one_hot(Her2Score::TwoPlus).to_vec(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(one_hot(Her2Score::ThreePlus).to_vec(), vec![0.0, 0.0, 0.0, 1.0]);
        for s in Her2Score::ALL {
            let v = one_hot(s);
            assert_eq!(v.sum(), 1.0);
            assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 1);
        }
    }

    fn gradient_tensor() -> ImageTensor {
        ImageTensor {
            data: Array3::from_shape_fn((16, 16, 3), |(i, j, k)| (i * 16 + j + k) as f32),
            range_tag: RangeTag::Raw0To255,
        }
    }

    #[test]
    fn augment_disabled_is_identity() {
        let img = gradient_tensor();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(&img, &AugmentPolicy::disabled(), &mut rng);
        assert_eq!(out, img);
    }

    #[test]
    fn rotation_180_is_involution() {
        let img = gradient_tensor();
        let policy = AugmentPolicy {
            rotation_degrees: vec![180],
            horizontal_flip: false,
            vertical_flip: false,
            scale_jitter: (1.0, 1.0),
            enabled: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let once = augment(&img, &policy, &mut rng);
        let twice = augment(&once, &policy, &mut rng);
        assert_eq!(twice, img);
    }

    #[test]
    fn augment_deterministic_and_shape_preserving() {
        let img = gradient_tensor();
        let policy = AugmentPolicy::default();
        let a = augment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.shape(), img.shape());
        assert_eq!(a.range_tag, img.range_tag);
    }

    fn manifest_on_disk(n: usize) -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let mut records = Vec::new();
        for i in 0..n {
            let score = Her2Score::from_index(i % 4).unwrap();
            let p = dir.path().join(format!("{i:04}_{}.png", score.label()));
            image::RgbImage::from_pixel(8, 8, image::Rgb([i as u8, 0, 0]))
                .save(&p)
                .unwrap();
            records.push(ImageRecord {
                path: p,
                sample_id: format!("{i:04}"),
                modality: StainModality::HE,
                score,
                split: Some(if i % 5 == 0 { Split::Test } else { Split::Train }),
                source_width_px: 8,
                source_height_px: 8,
            });
        }
        records.sort_by(|a, b| a.path.cmp(&b.path));
        let m = DatasetManifest {
            modality: StainModality::HE,
            records,
            seed: 0,
            pattern: crate::ingest::DEFAULT_LABEL_PATTERN.into(),
            skipped: 0,
        };
        (dir, m)
    }

    #[test]
    fn batches_cover_split_without_duplicates() {
        let (_dir, m) = manifest_on_disk(13);
        let stream = make_batches(&m, Split::Train, 4, Some(3), None).unwrap();
        let mut seen = Vec::new();
        let mut sizes = Vec::new();
        for b in stream {
            let b = b.unwrap();
            sizes.push(b.len());
            seen.extend(b.record_ids);
        }
        // 13 records, 3 in test (0000, 0005, 0010) -> 10 train.
        assert_eq!(sizes, vec![4, 4, 2]);
        seen.sort();
        let mut expected: Vec<String> = m
            .records_in(Split::Train)
            .iter()
            .map(|r| r.sample_id.clone())
            .collect();
        expected.sort();
        assert_eq!(seen, expected);
    }

    #[test]
    fn partial_batch_sizes_match_division() {
        // 977 = 3*256 + 209 at the reference batch size; scaled down here.
        // 16 records minus the 4 test records (ids 0, 5, 10, 15) = 12 train.
        let (_dir, m) = manifest_on_disk(16);
        let stream = make_batches(&m, Split::Train, 5, None, None).unwrap();
        let sizes: Vec<usize> = stream.map(|b| b.unwrap().len()).collect();
        assert_eq!(sizes, vec![5, 5, 2]);
    }

    #[test]
    fn single_record_yields_partial_batch() {
        let (_dir, m) = manifest_on_disk(5);
        // only 0000 is test
        let stream = make_batches(&m, Split::Test, 256, None, None).unwrap();
        let sizes: Vec<usize> = stream.map(|b| b.unwrap().len()).collect();
        assert_eq!(sizes, vec![1]);
    }

    #[test]
    fn same_seed_same_composition() {
        let (_dir, m) = manifest_on_disk(13);
        let ids = |seed| -> Vec<String> {
            make_batches(&m, Split::Train, 4, Some(seed), None)
                .unwrap()
                .flat_map(|b| b.unwrap().record_ids)
                .collect()
        };
        assert_eq!(ids(42), ids(42));
        assert_ne!(ids(42), ids(43));
    }

    #[test]
    fn test_split_preserves_manifest_order() {
        let (_dir, m) = manifest_on_disk(13);
        let ids: Vec<String> = make_batches(&m, Split::Test, 2, None, None)
            .unwrap()
            .flat_map(|b| b.unwrap().record_ids)
            .collect();
        let expected: Vec<String> = m
            .records_in(Split::Test)
            .iter()
            .map(|r| r.sample_id.clone())
            .collect();
        assert_eq!(ids, expected);
    }

    #[test]
    fn empty_split_errors() {
        let (_dir, mut m) = manifest_on_disk(4);
        for r in &mut m.records {
            r.split = Some(Split::Train);
        }
        assert!(matches!(
            make_batches(&m, Split::Test, 4, None, None),
            Err(Error::EmptySplit(_))
        ));
    }
}
